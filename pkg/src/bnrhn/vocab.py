from dataclasses import dataclass

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<PAD>", "<START>", "<END>", "<UNK>")


@dataclass(frozen=True)
class Vocab:
    """Token <-> id bijection with PAD=0, START=1, END=2, UNK=3."""

    tokens: tuple

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def from_words(cls, words):
        return cls(RESERVED + tuple(words))

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token):
        return self._index.get(token, UNK)

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]
