from fractions import Fraction

import numpy as np
import pytest

from pqadv import blackbox
from pqadv.blackbox import SubstituteSpec
from pqadv.errors import InsufficientData
from pqadv.nnet import AdamConfig, NetworkModel, default_specs


def test_type_one_copies_target_layers():
    assert blackbox.substitute_architecture(default_specs(), SubstituteSpec(1, "1/5")) == \
        default_specs()


@pytest.mark.parametrize("seed,n_conv", [(0, 2), (2, 2), (1, 4), (3, 4)])
def test_type_two_drops_or_adds_a_block(seed, n_conv):
    specs = blackbox.substitute_architecture(default_specs(), SubstituteSpec(2, "1/5", seed))
    assert sum(s.kind == "conv1d" for s in specs) == n_conv
    model = NetworkModel(specs)
    assert model.n_classes == 17
    dense_in = [s for s, sp in zip(model.shapes, model.specs) if sp.kind == "dense"][0]
    assert dense_in == (1280,)


def test_spec_validation_and_normalization():
    assert SubstituteSpec(1, 0.05).data_ratio == Fraction(1, 20)
    assert SubstituteSpec(1, "1/20").to_dict() == {"box_type": 1, "data_ratio": "1/20", "seed": 0}
    with pytest.raises(ValueError):
        SubstituteSpec(3, "1/5")
    with pytest.raises(ValueError):
        SubstituteSpec(1, 0)


def test_subset_is_seeded_and_sized():
    y = np.repeat(np.arange(1, 18), 20)
    a = blackbox.substitute_subset(y, SubstituteSpec(1, "1/2", 4))
    b = blackbox.substitute_subset(y, SubstituteSpec(1, "1/2", 4))
    c = blackbox.substitute_subset(y, SubstituteSpec(1, "1/2", 5))
    assert len(a) == 170 and np.array_equal(a, b) and not np.array_equal(a, c)
    assert len(np.unique(a)) == len(a)


def test_insufficient_data():
    y = np.repeat(np.arange(1, 18), 20)
    with pytest.raises(InsufficientData):
        blackbox.substitute_subset(y, SubstituteSpec(1, "1/50"))  # 6 signals
    skewed = np.concatenate([np.ones(300, dtype=int), np.arange(2, 18)])
    with pytest.raises(InsufficientData):
        blackbox.substitute_subset(skewed, SubstituteSpec(1, "1/10"))


def test_transfer_reports(tiny_data, tiny_model):
    _, (X, y), (Xt, yt) = tiny_data
    spec = SubstituteSpec(1, "1/2", 0)
    sub, idx, acc = blackbox.train_substitute(spec, X, y, tiny_model.specs,
                                              AdamConfig(epochs=2, batch_size=32), Xt, yt)
    assert len(idx) == len(y) // 2 and 0 <= acc <= 1
    ssa = blackbox.transfer_attack(sub, tiny_model, Xt[:15], "ssa", spec, acc)
    assert 0 <= ssa.transfer_rate_all <= 1 and 0 <= ssa.transfer_rate <= 1
    assert ssa.n_evaluated == round(ssa.substitute_fool_rate * 15)
    saa = blackbox.transfer_attack(sub, tiny_model, Xt[:15], "saa", spec, acc,
                                   X_attack=X[idx[:20]], max_epochs=1)
    assert saa.transfer_rate == saa.transfer_rate_all
    d = blackbox.summarize([ssa, ssa])
    assert d["std_transfer_rate"] == 0.0 and d["mean_transfer_rate"] == ssa.transfer_rate
    assert d["reports"][0]["spec"]["data_ratio"] == "1/2"
    with pytest.raises(ValueError):
        blackbox.transfer_attack(sub, tiny_model, Xt[:5], "saa", spec)
    with pytest.raises(ValueError):
        blackbox.transfer_attack(sub, tiny_model, Xt[:5], "pgd", spec)
