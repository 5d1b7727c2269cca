import pytest
import torch

from narslu.corpus import CLS_ID, N_SLOT_SPECIALS, Batch, Vocabulary, load_split
from narslu.model import ModelConfig, SluTransformer
from narslu.synth import generate_corpus
from narslu.training import RunSettings, train

TINY = dict(
    d_model=8,
    d_ff=16,
    n_enc_layers=2,
    n_dec_layers=2,
    n_heads=2,
    dropout=0.0,
    rel_clip=3,
    lrm_layers=(1,),
)

TINY_SETTINGS = {
    "d_model": "8",
    "d_ff": "16",
    "n_enc_layers": "2",
    "n_dec_layers": "2",
    "n_heads": "2",
    "dropout": "0.1",
    "rel_clip": "3",
    "lrm_layers": "1",
}


def tiny_config(n_tokens=13, n_intents=3, n_slot_tags=5, **overrides) -> ModelConfig:
    kwargs = dict(TINY, n_tokens=n_tokens, n_intents=n_intents, n_slot_tags=n_slot_tags)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def tiny_model(seed=0, **overrides) -> SluTransformer:
    torch.manual_seed(seed)
    return SluTransformer(tiny_config(**overrides))


def random_batch(cfg: ModelConfig, lengths, seed=0) -> Batch:
    """Random well-formed batch for a model config (CLS prepended, padded)."""
    gen = torch.Generator().manual_seed(seed)
    longest = max(lengths)
    b = len(lengths)
    token_ids = torch.zeros(b, 1 + longest, dtype=torch.long)
    slot_ids = torch.zeros(b, longest, dtype=torch.long)
    pad_mask = torch.zeros(b, 1 + longest, dtype=torch.bool)
    for i, n in enumerate(lengths):
        token_ids[i, 0] = CLS_ID
        token_ids[i, 1 : 1 + n] = torch.randint(3, cfg.n_tokens, (n,), generator=gen)
        slot_ids[i, :n] = torch.randint(
            N_SLOT_SPECIALS, N_SLOT_SPECIALS + cfg.n_slot_tags, (n,), generator=gen
        )
        pad_mask[i, : 1 + n] = True
    intent_ids = torch.randint(0, cfg.n_intents, (b,), generator=gen)
    return Batch(token_ids, slot_ids, intent_ids, pad_mask, torch.tensor(lengths))


@pytest.fixture(scope="session")
def toy_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toycorpus")
    generate_corpus(out, n_train=160, n_valid=48, n_test=48, seed=7)
    return out


@pytest.fixture(scope="session")
def toy_vocab(toy_data_dir):
    return Vocabulary.build(load_split(toy_data_dir, "train"))


@pytest.fixture(scope="session")
def toy_run_dir(tmp_path_factory, toy_data_dir):
    """A short real training run shared by eval/bench CLI tests."""
    out = tmp_path_factory.mktemp("toyrun")
    settings = RunSettings.from_mapping({**TINY_SETTINGS, "max_epochs": "3", "seed": "1"})
    train(settings, toy_data_dir, out)
    return out
