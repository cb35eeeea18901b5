from collections import Counter

import numpy as np
import pytest

from tgaml.ingest import load_corpus, parse_csv
from tgaml.synthgen import GenSpec, MotifSpec, SpecError, build_corpus, generate

SMALL = GenSpec(num_accounts=300, num_background_tx=3000, num_steps=24, seed=3,
                motifs=(MotifSpec("fan_in", 2, 3, 4), MotifSpec("fan_out", 2, 3, 4),
                        MotifSpec("cycle", 2, 3, 4), MotifSpec("scatter_gather", 1, 4, 5)))


def test_same_seed_gives_identical_bytes(tmp_path):
    a, _ = generate(SMALL, tmp_path / "a")
    b, _ = generate(SMALL, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    c, _ = generate(GenSpec(**{**SMALL.__dict__, "seed": 4}), tmp_path / "c")
    assert a.read_bytes() != c.read_bytes()


def test_three_cycles_of_four_flag_twelve_transactions():
    spec = GenSpec(num_accounts=200, num_background_tx=1000, num_steps=12, seed=1,
                   motifs=(MotifSpec("cycle", 3, 4, 4),))
    c = build_corpus(spec)
    assert int(c.laundering.sum()) == 12 and c.motif_counts["cycle"] == 12


def test_launderers_are_the_motif_participants():
    c = build_corpus(SMALL)
    flagged = c.laundering
    union = set(c.src[flagged].tolist()) | set(c.dst[flagged].tolist())
    assert set(c.launderers.tolist()) == union


def test_output_parses_through_ingest_without_skips(tmp_path):
    csv_path, labels = generate(SMALL, tmp_path)
    c = build_corpus(SMALL)
    parsed = parse_csv(csv_path, lenient=True)
    assert parsed.skipped == 0 and len(parsed.rows) == len(c.src)
    inter = load_corpus(csv_path)
    launderers = {a.account_key for a in inter.accounts if a.is_launderer}
    assert launderers == {c.key(i) for i in c.launderers}
    assert sum(1 for line in labels.read_text().splitlines()[1:] if line.endswith(",1")) == len(c.launderers)


def test_cycle_hops_follow_consecutive_steps():
    spec = GenSpec(num_accounts=200, num_background_tx=1000, num_steps=12, seed=2, decoys=False,
                   motifs=(MotifSpec("cycle", 1, 4, 4),))
    c = build_corpus(spec)
    f = c.laundering
    hops = sorted(zip(c.step[f].tolist(), c.src[f].tolist(), c.dst[f].tolist()))
    steps = [h[0] for h in hops]
    assert steps == list(range(steps[0], steps[0] + 4))
    assert all(hops[i][2] == hops[i + 1][1] for i in range(3)) and hops[-1][2] == hops[0][1]


def test_control_preserves_static_structure():
    a, b = build_corpus(SMALL), build_corpus(SMALL, control=True)
    for name in ("src", "dst", "amount", "laundering", "pay_currency", "fmt", "minute"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert np.array_equal(a.step[~a.laundering], b.step[~b.laundering])
    assert Counter(a.step[a.laundering].tolist()) == Counter(b.step[b.laundering].tolist())
    assert not np.array_equal(a.step[a.laundering], b.step[b.laundering])


def test_decoys_replay_the_program_among_lawful_accounts():
    c = build_corpus(SMALL)
    lawful = np.ones(len(c.accounts), bool)
    lawful[c.launderers] = False
    flagged_out = np.bincount(c.src[c.laundering], minlength=len(c.accounts))
    assert flagged_out[lawful].sum() == 0
    no_decoys = build_corpus(GenSpec(**{**SMALL.__dict__, "decoys": False}))
    assert len(no_decoys.src) == len(c.src)


def test_launderer_share_near_target():
    c = build_corpus(GenSpec(seed=0))
    assert 0.03 <= len(c.launderers) / 2000 <= 0.05


@pytest.mark.parametrize("kwargs", [
    {"launderer_fraction": 0.5}, {"num_steps": 1},
    {"num_accounts": 40, "motifs": (MotifSpec("fan_in", 1, 5, 5),)},
])
def test_invalid_specs(kwargs):
    with pytest.raises(SpecError):
        GenSpec(**kwargs)


def test_from_config_rejects_unknown_keys():
    spec = GenSpec.from_config({"num_accounts": 100, "motifs.cycle.count": 2, "motifs.cycle.min_size": 3})
    assert spec.motifs == (MotifSpec("cycle", 2, 3, 3),)
    with pytest.raises(SpecError):
        GenSpec.from_config({"accounts": 10})
