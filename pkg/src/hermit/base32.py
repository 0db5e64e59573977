"""Base32 with the store alphabet (no e, o, u, t), most significant bits first."""

ALPHABET = "0123456789abcdfghijklmnpqrsvwxyz"
_INDEX = {c: i for i, c in enumerate(ALPHABET)}


def encoded_length(nbytes: int) -> int:
    return -(-nbytes * 8 // 5)


def encode(data: bytes) -> str:
    nbits = len(data) * 8
    nchars = encoded_length(len(data))
    # pad with zero bits on the right so the value splits into whole groups
    n = int.from_bytes(data, "big") << (nchars * 5 - nbits)
    return "".join(ALPHABET[(n >> (5 * (nchars - 1 - i))) & 31] for i in range(nchars))


def decode(text: str, nbytes: int) -> bytes:
    if len(text) != encoded_length(nbytes):
        raise ValueError(f"expected {encoded_length(nbytes)} base32 characters, got {len(text)}")
    n = 0
    for c in text:
        try:
            n = (n << 5) | _INDEX[c]
        except KeyError:
            raise ValueError(f"invalid base32 character {c!r}") from None
    pad = len(text) * 5 - nbytes * 8
    if n & ((1 << pad) - 1):
        raise ValueError("non-zero padding bits")
    return (n >> pad).to_bytes(nbytes, "big")


def is_valid(text: str, nbytes: int) -> bool:
    try:
        decode(text, nbytes)
    except ValueError:
        return False
    return True
