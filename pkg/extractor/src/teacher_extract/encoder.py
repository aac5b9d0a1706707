"""Contextual encoder wrapper: per-word pooled output-layer vectors.

Words are fed pre-split; the fast tokenizer's word alignment maps each
word to its subword output vectors, which are mean-pooled.  Encoder
special markers never enter a pool.  A word whose pieces include the
unknown token (or that maps to no pieces) counts as an alignment failure
and yields None.
"""

from __future__ import annotations

import numpy as np


class EncoderError(ValueError):
    pass


class HfEncoder:
    """Wraps a transformers model named ``hf:<model-name-or-path>``.

    Inference only: the model runs in eval mode with gradients disabled,
    and only the output (last) layer is read.
    """

    def __init__(self, spec: str, max_length: int | None = None):
        if not spec.startswith("hf:"):
            raise EncoderError(
                f"unknown encoder spec {spec!r}; expected 'hf:<name-or-path>'"
            )
        name = spec[3:]
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(name)
        if not self.tokenizer.is_fast:
            raise EncoderError(f"{name}: need a fast tokenizer for word alignment")
        self.model = AutoModel.from_pretrained(name)
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)
        limit = getattr(self.model.config, "max_position_embeddings", None)
        self.max_length = min(x for x in (max_length, limit) if x is not None) if (
            max_length or limit
        ) else None

    def encode_batch(
        self, word_seqs: list[list[str]]
    ) -> list[list[np.ndarray | None] | None]:
        """Pooled per-word vectors for each pre-split word sequence.

        Returns, per sequence, a list aligned with the input words where an
        entry is the word's mean-pooled output vector or None on alignment
        failure; a whole sequence is None when it exceeds the encoder's
        length limit.
        """
        enc = self.tokenizer(
            word_seqs,
            is_split_into_words=True,
            padding=True,
            return_tensors="pt",
        )
        lengths = enc["attention_mask"].sum(dim=1)
        if self.max_length is not None and int(lengths.max()) > self.max_length:
            # re-encode only the sequences that fit
            keep = [i for i in range(len(word_seqs)) if int(lengths[i]) <= self.max_length]
            out: list = [None] * len(word_seqs)
            if keep:
                sub = self.encode_batch([word_seqs[i] for i in keep])
                for i, res in zip(keep, sub):
                    out[i] = res
            return out
        with self._torch.no_grad():
            hidden = self.model(**enc).last_hidden_state  # (B, T, Dt)
        hidden = hidden.cpu().numpy().astype(np.float32)
        unk_id = self.tokenizer.unk_token_id
        results = []
        for i, words in enumerate(word_seqs):
            word_ids = enc.word_ids(batch_index=i)
            ids = enc["input_ids"][i].tolist()
            groups: dict[int, list[int]] = {}
            for t, w in enumerate(word_ids):
                if w is not None:  # None marks special or padding tokens
                    groups.setdefault(w, []).append(t)
            per_word: list[np.ndarray | None] = []
            for w in range(len(words)):
                toks = groups.get(w, [])
                if not toks or (unk_id is not None and any(ids[t] == unk_id for t in toks)):
                    per_word.append(None)
                else:
                    per_word.append(hidden[i, toks].mean(axis=0))
            results.append(per_word)
        return results
