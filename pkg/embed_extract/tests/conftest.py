import json
import os

import pytest


@pytest.fixture(scope="session")
def tiny_encoder_dir(tmp_path_factory):
    """A small randomly-initialized BERT saved locally, so tests run offline."""
    import torch
    from transformers import BertConfig, BertModel, BertTokenizer

    d = tmp_path_factory.mktemp("tiny-encoder")
    vocab = (
        ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        + [chr(c) for c in range(ord("a"), ord("z") + 1)]
        + ["##" + chr(c) for c in range(ord("a"), ord("z") + 1)]
    )
    (d / "vocab.txt").write_text("\n".join(vocab))
    tokenizer = BertTokenizer(str(d / "vocab.txt"))
    torch.manual_seed(1234)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    model = BertModel(config)
    model.save_pretrained(d)
    tokenizer.save_pretrained(d)
    return str(d)


@pytest.fixture()
def ten_doc_fixture(tmp_path):
    """Ten documents with mixed truth labels."""
    docs = []
    for i in range(10):
        truth = "positive" if i < 4 else ("negative" if i < 8 else None)
        docs.append(
            {
                "id": f"doc-{i:02d}",
                "title": f"study {chr(ord('a') + i)}",
                "abstract": f"findings about topic {chr(ord('a') + i)} and more",
                "truth": truth,
            }
        )
    path = tmp_path / "docs.jsonl"
    path.write_text("\n".join(json.dumps(doc) for doc in docs) + "\n")
    return path
