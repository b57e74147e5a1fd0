"""Symbol tables and label encoding shared by the data and model code."""

DEFAULT_SYMBOLS = "0123456789abcdefghijklmnopqrstuvwxyz"
EOS = 0


class Charset:
    """Ordered, case-insensitive symbol list.

    Class index 0 is reserved for end-of-sequence; symbol ``i`` of the
    list maps to class ``i + 1``. An extra index ``num_classes`` is used as
    the start token by the decoder embedding.
    """

    def __init__(self, symbols=DEFAULT_SYMBOLS):
        symbols = str(symbols).lower()
        if not symbols:
            raise ValueError("charset must not be empty")
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"charset has duplicate symbols: {symbols!r}")
        self.symbols = symbols
        self._index = {s: i + 1 for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __repr__(self):
        return f"Charset({self.symbols!r})"

    def __eq__(self, other):
        return isinstance(other, Charset) and other.symbols == self.symbols

    @property
    def num_classes(self):
        return len(self.symbols) + 1

    @property
    def bos(self):
        return self.num_classes

    def normalize(self, text):
        """Lower-case ``text`` and drop symbols outside the charset."""
        return "".join(c for c in text.lower() if c in self._index)

    def encode(self, text):
        try:
            return [self._index[c] for c in text.lower()]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in charset {self.symbols!r}") from None

    def decode(self, indices):
        out = []
        for i in indices:
            i = int(i)
            if i == EOS:
                break
            out.append(self.symbols[i - 1])
        return "".join(out)
