import math

import numpy as np
import pytest

from mpunet.nncore import forward
from mpunet.unetzoo import (ArchSpec, audit, build, count_params, encoder_channels,
                            formula_params)
from mpunet.nncore.graph import NetworkGraph


# Closed forms transcribed with 1-based levels m = 1..N, d(En^m) = base * 2^m;
# decoder stage j = 1..N-1, De^N is the bottleneck.

def _enc(base, n, sqrt2=False):
    s = math.sqrt(2) if sqrt2 else 1.0
    return {m: int(math.floor(base * 2 ** m * s + 0.5)) for m in range(1, n + 1)}


def oracle_unet2p(F, n, base, j):
    en = _enc(base, n)
    de = dict(en)   # nested nodes keep the encoder depth of their level
    me = en[j]
    inner = sum(me for _ in range(1, n - j))
    return F * F * (de[j + 1] * de[j] + (en[j] + inner + de[j]) * de[j])


def oracle_unet3p(F, n, base, j, cat=64):
    en = _enc(base, n)
    de = {m: cat * n for m in range(1, n)}
    de[n] = en[n]
    return F * F * ((sum(en[m] for m in range(1, j + 1))
                     + sum(de[m] for m in range(j + 1, n + 1))) * cat + de[j] ** 2)


def oracle_unet(F, n, base, j, sqrt2=False):
    en = _enc(base, n, sqrt2)
    de = dict(en)
    return F * F * (de[j] * de[j + 1] + de[j] ** 2 + (en[j] + de[j]) * de[j])


ORACLES = {"unet": oracle_unet, "unet2p": oracle_unet2p, "unet3p": oracle_unet3p}


def _walk_stage_kernels(g, stage):
    """Sum of conv/tconv kernel sizes over nodes tagged ``stage``, read off the node list."""
    total = 0
    for node in g.nodes:
        if node.kind in ("conv", "tconv") and node.stage == stage:
            total += int(np.prod(g.params[node.params[0]].shape))
    return total


@pytest.mark.parametrize("variant", ["unet", "unet2p", "unet3p"])
@pytest.mark.parametrize("levels", [3, 4, 5])
@pytest.mark.parametrize("base", [8, 32])
def test_formula_equals_oracle_and_graph(variant, levels, base):
    spec = ArchSpec(variant, levels=levels, base_channels=base)
    g = build(spec, materialize=False)
    for j in range(levels - 1):
        expect = ORACLES[variant](3, levels, base, j + 1)
        assert formula_params(spec, j) == expect
        assert _walk_stage_kernels(g, f"dec{j}") == expect


def test_unet3p_first_stage_hand_value():
    spec = ArchSpec("unet3p", levels=5, base_channels=32)
    # 9 * [(64 + 320 + 320 + 320 + 1024) * 64 + 320^2]
    assert formula_params(spec, 0) == 9 * ((64 + 3 * 320 + 1024) * 64 + 320 ** 2) == 2_101_248


def test_sqrt2_schedule_rounds_half_up():
    spec = ArchSpec("unet", base_channels=32, unet_sqrt2_scale=True)
    assert encoder_channels(spec) == [91, 181, 362, 724, 1448]
    g = build(spec, materialize=False)
    for row in audit(spec, g):
        assert row["formula"] == oracle_unet(3, 5, 32, row["stage"] + 1, sqrt2=True)
        assert row["delta"] == 0


def test_full_size_totals():
    totals = {}
    for name, spec in {"unet": ArchSpec("unet", unet_sqrt2_scale=True),
                       "unet2p": ArchSpec("unet2p"), "unet3p": ArchSpec("unet3p")}.items():
        totals[name], _ = count_params(build(spec, materialize=False))
    assert totals["unet"] > totals["unet2p"] > totals["unet3p"]
    for name, ref in {"unet": 62e6, "unet2p": 36e6, "unet3p": 27e6}.items():
        assert abs(totals[name] - ref) / ref <= 0.20


def test_single_conv_count():
    g = NetworkGraph(2)
    g.set_outputs([g.conv(g.input, 4, "c", "s")])
    total, breakdown = count_params(g)
    assert total == 3 * 3 * 2 * 4 + 4 == 76
    assert breakdown["s"] == {"kernel": 72, "bias": 4, "bn": 0}


def test_breakdown_sums_to_total():
    g = build(ArchSpec("unet2p", True, base_channels=8), materialize=False)
    total, breakdown = count_params(g)
    assert total == sum(sum(v.values()) for v in breakdown.values())
    assert total == sum(int(np.prod(p.shape)) for p in g.params.values())


@pytest.mark.parametrize("variant", ["unet2p", "unet3p"])
def test_deep_supervision_adds_parameters(variant):
    plain, _ = count_params(build(ArchSpec(variant), materialize=False))
    ds, _ = count_params(build(ArchSpec(variant, True), materialize=False))
    assert ds > plain


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec("unet", deep_supervision=True)
    with pytest.raises(ValueError):
        ArchSpec("vnet")
    with pytest.raises(ValueError):
        ArchSpec(levels=1)
    with pytest.raises(ValueError):
        ArchSpec(base_channels=0)
    with pytest.raises(ValueError):
        ArchSpec("unet2p", unet_sqrt2_scale=True)


def test_stage_out_of_range():
    spec = ArchSpec("unet2p", levels=5)
    with pytest.raises(ValueError):
        formula_params(spec, 4)
    with pytest.raises(ValueError):
        formula_params(spec, -1)


@pytest.mark.parametrize("variant,ds,n_out", [("unet", False, 1), ("unet2p", False, 1),
                                               ("unet3p", False, 1), ("unet2p", True, 10),
                                               ("unet3p", True, 4)])
def test_forward_shapes(variant, ds, n_out):
    spec = ArchSpec(variant, ds, levels=5, base_channels=8, input_channels=2, num_classes=8)
    g = build(spec, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 64, 64, 2)).astype(np.float32)
    outs = forward(g, x, "infer")
    assert len(outs) == n_out
    assert all(o.shape == (1, 64, 64, 8) for o in outs)


def test_materialized_and_placeholder_counts_agree():
    spec = ArchSpec("unet3p", True, levels=4, base_channels=8)
    assert count_params(build(spec))[0] == count_params(build(spec, materialize=False))[0]


def test_build_is_deterministic():
    spec = ArchSpec("unet2p", levels=3, base_channels=4)
    a, b = build(spec, seed=5), build(spec, seed=5)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
