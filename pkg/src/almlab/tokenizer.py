"""Byte-level tokenizer with a handful of named special tokens."""

from __future__ import annotations

SPECIAL_TOKENS = ("<|pad|>", "<|bos|>", "<|eos|>", "<|AUDIO|>", "<|system|>", "<|user|>", "<|assistant|>")


class ByteTokenizer:
    """Ids 0-255 are raw UTF-8 bytes; specials follow in ``SPECIAL_TOKENS`` order."""

    def __init__(self):
        self.specials = {name: 256 + i for i, name in enumerate(SPECIAL_TOKENS)}
        self.names = {v: k for k, v in self.specials.items()}

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.specials)

    def __getitem__(self, name: str) -> int:
        return self.specials[name]

    @property
    def pad_id(self):
        return self.specials["<|pad|>"]

    @property
    def eos_id(self):
        return self.specials["<|eos|>"]

    @property
    def audio_id(self):
        return self.specials["<|AUDIO|>"]

    def encode(self, text: str) -> list[int]:
        # special-token strings inside text are encoded as plain bytes
        return list(text.encode("utf-8"))

    def decode(self, ids, skip_special: bool = True) -> str:
        out: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if i < 256:
                buf.append(i)
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            if not skip_special:
                out.append(self.names.get(i, f"<|{i}|>"))
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)


TOKENIZER = ByteTokenizer()
