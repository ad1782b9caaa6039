import typing

from shared.errors import DatasetError

PAD, CLS, UNK, MASK = "[PAD]", "[CLS]", "[UNK]", "[MASK]"
RESERVED_TOKENS = (PAD, CLS, UNK, MASK)
PAD_ID, CLS_ID, UNK_ID, MASK_ID = range(4)


class Vocabulary:
    """
    Whitespace vocabulary. Line index in the vocab file is the token id; ids 0..3 are
    [PAD], [CLS], [UNK], [MASK].
    """

    def __init__(self, tokens: typing.Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise DatasetError(f"vocabulary must start with {RESERVED_TOKENS}, got {tuple(tokens[:4])}")
        if len(set(tokens)) != len(tokens):
            raise DatasetError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def from_words(cls, words: typing.Iterable[str]) -> "Vocabulary":
        seen = list(RESERVED_TOKENS)
        known = set(seen)
        for w in words:
            if w not in known:
                known.add(w)
                seen.append(w)
        return cls(seen)

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r") as f:
            tokens = [line.rstrip("\n") for line in f]
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)

    def save(self, path: str):
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word: str):
        return word in self.ids

    def encode(self, text: str, max_seq_len: typing.Optional[int] = None) -> typing.Tuple[int, ...]:
        ids = [CLS_ID] + [self.ids.get(w, UNK_ID) for w in text.split()]
        if max_seq_len is not None:
            ids = ids[:max_seq_len]
        return tuple(ids)

    def known_ids(self, text: str) -> typing.List[int]:
        return [self.ids[w] for w in text.split() if w in self.ids]
