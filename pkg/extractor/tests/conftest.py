"""Shared fixtures: an offline toy encoder covering the fixture corpus."""

import os
from pathlib import Path

import pytest

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

FIXTURES = Path(__file__).parent / "fixtures"


def wordpiece_vocab_for(words):
    """Specials plus greedy pieces: 4-char stems and 3-char continuations."""
    pieces = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    seen = set(pieces)
    for w in sorted(set(words)):
        cand = [w] if len(w) <= 4 else [w[:4]] + [
            "##" + w[i : i + 3] for i in range(4, len(w), 3)
        ]
        for c in cand:
            if c not in seen:
                seen.add(c)
                pieces.append(c)
    return pieces


def build_toy_encoder(out_dir: Path, words, hidden_size=32, seed=0,
                      max_position_embeddings=128) -> Path:
    import torch
    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
    from transformers import BertConfig, BertModel, BertTokenizerFast

    pieces = wordpiece_vocab_for(words)
    vocab = {p: i for i, p in enumerate(pieces)}
    tk = Tokenizer(
        models.WordPiece(vocab=vocab, unk_token="[UNK]", max_input_chars_per_word=100)
    )
    tk.normalizer = normalizers.BertNormalizer(lowercase=True)
    tk.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    tk.post_processor = processors.TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    fast = BertTokenizerFast(
        tokenizer_object=tk, unk_token="[UNK]", pad_token="[PAD]",
        cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]",
    )
    # every covered word must tokenize without the unknown token
    for w in set(words):
        assert "[UNK]" not in fast.tokenize(w), w
    torch.manual_seed(seed)
    config = BertConfig(
        vocab_size=len(pieces), hidden_size=hidden_size, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=2 * hidden_size,
        max_position_embeddings=max_position_embeddings,
    )
    model = BertModel(config)
    model.eval()
    out_dir.mkdir(parents=True, exist_ok=True)
    fast.save_pretrained(out_dir)
    model.save_pretrained(out_dir)
    return out_dir


@pytest.fixture(scope="session")
def toy_encoder_dir(tmp_path_factory) -> Path:
    """Toy encoder whose wordpieces cover every fixture-corpus word."""
    from teacher_extract.windows import tokenize

    text = (FIXTURES / "shared_corpus.txt").read_text(encoding="utf-8")
    words = set(tokenize(text.replace("<<<DOC>>>", " ")))
    return build_toy_encoder(tmp_path_factory.mktemp("encoder"), sorted(words))
