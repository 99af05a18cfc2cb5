import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small 3-class synthetic corpus shared by fast tests."""
    from flowclass.synthgen import CorpusSpec, generate

    spec = CorpusSpec(class_counts=[30, 15, 8], unlabeled_factor=1.5,
                      shared_fraction=0.3, payload_bytes=32,
                      packets_min=6, packets_max=10, seed=11)
    labeled, unlabeled = generate(spec)
    return labeled, unlabeled


@pytest.fixture(scope="session")
def tiny_encoded(tiny_corpus):
    from flowclass.tokenizer import build_vocab, encode_corpus

    labeled, unlabeled = tiny_corpus
    vocab = build_vocab(labeled + unlabeled, 32, 8)
    return (encode_corpus(labeled, vocab), encode_corpus(unlabeled, vocab),
            vocab)
