import numpy as np
import pytest

from biasprobe.corpus import (SyntheticCorpusSpec, build_vocab, chunk,
                              generate_synthetic, split, tokenize_document)
from biasprobe.embed import AnchorLexicon, CorpusIndex
from biasprobe.model import MaskingPolicy, ModelConfig, train

MALE_ANCHORS = ("boris", "karel", "joris", "pieter", "daan", "sven")
FEMALE_ANCHORS = ("fenna", "lotte", "sanne", "mirte", "noor", "evi")


def make_spec(**overrides) -> SyntheticCorpusSpec:
    base = dict(
        male_words=MALE_ANCHORS,
        female_words=FEMALE_ANCHORS,
        professions=(("lasser", 0.9), ("bakker", 0.1)),
        num_sentences=600,
        seed=11,
        num_documents=10,
    )
    base.update(overrides)
    return SyntheticCorpusSpec(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small tokenized corpus shared by model/embed tests."""
    docs = generate_synthetic(make_spec())
    tokenizer = build_vocab(docs, max_vocab=2000, min_freq=2)
    tokenized = [tokenize_document(tokenizer, d) for d in docs]
    chunks_by_doc = {td.doc_id: chunk(td, max_len=62, stride=31) for td in tokenized}
    all_chunks = [c for td in tokenized for c in chunks_by_doc[td.doc_id]]
    corpus_split = split(all_chunks, (0.8, 0.1, 0.1), seed=0)
    index = CorpusIndex(tokenized, chunks_by_doc)
    return dict(docs=docs, tokenizer=tokenizer, tokenized=tokenized,
                chunks_by_doc=chunks_by_doc, split=corpus_split, index=index)


@pytest.fixture(scope="session")
def anchor_lexicon():
    pairs = tuple((m, f, "") for m, f in zip(MALE_ANCHORS, FEMALE_ANCHORS))
    return AnchorLexicon(pairs)


@pytest.fixture(scope="session")
def trained_run(tiny_corpus):
    """A short but learnable training run shared across test modules."""
    tokenizer = tiny_corpus["tokenizer"]
    config = ModelConfig(vocab_size=tokenizer.vocab_size, num_layers=2,
                         hidden_dim=32, num_heads=4, ffn_dim=64,
                         max_len=64, seed=1)
    policy = MaskingPolicy(seed=2)
    checkpoints = train(tiny_corpus["split"], config, policy, num_epochs=10,
                        checkpoint_every=9, batch_size=16)
    return dict(config=config, policy=policy, checkpoints=checkpoints,
                **tiny_corpus)


def labeled_embedding_dataset(rng: np.random.Generator, n_groups=20,
                              per_group=20, d=8, signal_dims=(0,),
                              signal=1.0, noise=1.0, group_noise=0.3,
                              checkpoint=0):
    """Synthetic LabeledEmbedding list with gender signal in chosen dimensions."""
    from biasprobe.embed import LabeledEmbedding

    dataset = []
    for g in range(n_groups):
        label = g % 2
        sign = 1.0 if label == 1 else -1.0
        offset = rng.normal(scale=group_noise, size=d)
        for i in range(per_group):
            vec = rng.normal(scale=noise, size=d) + offset
            for j in signal_dims:
                vec[j] += sign * signal
            dataset.append(LabeledEmbedding(vec, label, f"word{g}", checkpoint,
                                            (f"doc{g}", i)))
    return dataset
