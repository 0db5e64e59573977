"""hermit: a miniature functional package manager.

Builds are pure functions of their inputs whose results live in a
content-addressed store; packages are declarative values; profiles are
generational and can be rolled back; closures move between stores as
self-checking archive streams.
"""

__version__ = "0.1.0"
