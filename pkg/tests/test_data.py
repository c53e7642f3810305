import numpy as np
import pytest

from critart import autodiff as ad
from critart.data import (
    ArticulatorChannel,
    CorpusFormatError,
    NormStats,
    SyntheticSpec,
    Utterance,
    generate_corpus,
    load_corpus,
    make_batches,
    planted_oracle,
    read_utterance,
    write_corpus,
)

C = ArticulatorChannel


@pytest.fixture(scope="module")
def spec():
    return SyntheticSpec(seed=3)


@pytest.fixture(scope="module")
def corpus200(spec):
    return generate_corpus(spec, 200, 6)


def critical_mask(spec, utt):
    table = spec.phonemes
    mask = np.zeros((utt.frames, 12), dtype=bool)
    for t, lab in enumerate(utt.labels):
        for ch, _ in spec.critical[table[lab]]:
            mask[t, ch] = True
    return mask


def test_channel_enumeration():
    assert len(C) == 12
    assert [c.name for c in C][:3] == ["UL_x", "UL_y", "LL_x"]
    assert C.JAW_y.display == "Jaw_y" and C.parse("Jaw_y") is C.JAW_y
    with pytest.raises(ValueError):
        C.parse("NOSE_x")


def test_generation_is_deterministic(spec):
    a, b = generate_corpus(spec, 5, 6), generate_corpus(SyntheticSpec(seed=3), 5, 6)
    for u, v in zip(a, b):
        assert np.array_equal(u.mfcc, v.mfcc) and np.array_equal(u.ema, v.ema) and np.array_equal(u.labels, v.labels)
    c = generate_corpus(SyntheticSpec(seed=4), 1, 6)[0]
    assert not np.array_equal(a[0].ema, c.ema)


def test_generation_shards_merge(spec):
    whole = generate_corpus(spec, 6, 4)
    shards = generate_corpus(spec, 3, 4, start_index=3) + generate_corpus(spec, 3, 4)
    by_id = {u.id: u for u in shards}
    for u in whole:
        assert np.array_equal(by_id[u.id].ema, u.ema)


def test_generation_shapes_and_segments(spec):
    utt = generate_corpus(spec, 1, 6)[0]
    assert utt.mfcc.shape == (utt.frames, 13) and utt.ema.shape == (utt.frames, 12)
    runs = 1 + int(np.sum(utt.labels[1:] != utt.labels[:-1]))
    assert runs == 6  # no phone repeats back to back
    assert 6 * 5 <= utt.frames <= 6 * 15
    assert np.all(np.abs(utt.ema) <= 1.0 + 1e-9 + 5 * spec.sigma_c)


def test_degenerate_scales():
    spec = SyntheticSpec(alpha=1e-12, sigma_w=0.0, sigma_c=0.0, sigma_a=0.0, seed=1)
    utt = generate_corpus(spec, 1, 4)[0]
    crit = critical_mask(spec, utt)
    targets = np.zeros((utt.frames, 12))
    for t, lab in enumerate(utt.labels):
        for ch, tgt in spec.critical[spec.phonemes[lab]]:
            targets[t, ch] = tgt
    assert np.allclose(utt.ema[crit], targets[crit], atol=1e-9)
    # a channel that is never critical in this utterance never moves
    never = ~crit.any(axis=0)
    assert np.any(never)
    assert np.all(utt.ema[:, never] == utt.ema[0, never])


def test_critical_channels_vary_less(spec, corpus200):
    values = {ph: [] for ph in spec.phonemes}
    for u in corpus200:
        for t, lab in enumerate(u.labels):
            values[spec.phonemes[lab]].append(u.ema[t])
    for ph, rows in values.items():
        var = np.var(np.array(rows), axis=0)
        crit = [ch for ch, _ in spec.critical[ph]]
        others = [c for c in range(12) if c not in crit]
        assert var[crit].max() < var[others].min(), ph


def test_oracle_matches_lowest_variance_channels(spec, corpus200):
    agree = 0
    for ph in spec.phonemes:
        rows = [u.ema[t] for u in corpus200 for t, lab in enumerate(u.labels) if spec.phonemes[lab] == ph]
        var = np.var(np.array(rows), axis=0)
        oracle = planted_oracle(spec, ph)
        lowest = set(np.argsort(var)[: len(oracle)])
        agree += lowest == {int(c) for c in oracle}
    assert agree >= 0.9 * len(spec.phonemes)


def test_planted_oracle_readback():
    spec = SyntheticSpec(critical={"m": [(C.JAW_y, 0.4), (C.LL_y, -0.8)], "t": [(C.TT_y, 0.5)]})
    assert planted_oracle(spec, "m") == [C.LL_y, C.JAW_y]
    assert all(len(planted_oracle(spec, ph)) >= 1 for ph in spec.phonemes)
    with pytest.raises(KeyError):
        planted_oracle(spec, "zh")


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(critical={"a": []})
    with pytest.raises(ValueError):
        SyntheticSpec(alpha=1.0)
    proj = np.ones((13, 12))
    proj[:, C.UL_y] = 0
    with pytest.raises(ValueError, match="UL_y"):
        SyntheticSpec(projection=proj)


def test_acoustics_depend_on_critical_channels(spec, corpus200):
    utts = corpus200[:20]

    def recon_error(P):
        return sum(np.sum((u.mfcc - (u.ema * critical_mask(spec, u)) @ P.T) ** 2) for u in utts)

    base = recon_error(spec.projection)
    for ch in {c for chans in spec.critical.values() for c, _ in chans}:
        P = spec.projection.copy()
        P[:, ch] = 0
        assert recon_error(P) > base


# --- file format ------------------------------------------------------------


def test_round_trip(tmp_path, spec):
    corpus = generate_corpus(spec, 3, 3)
    manifest = write_corpus(corpus, tmp_path)
    loaded = load_corpus(manifest)
    for a, b in zip(corpus, loaded):
        assert a.id == b.id and a.subject == b.subject and a.phoneme_table == b.phoneme_table
        assert np.array_equal(a.mfcc, b.mfcc) and np.array_equal(a.ema, b.ema) and np.array_equal(a.labels, b.labels)
    again = load_corpus(write_corpus(loaded, tmp_path / "copy"))
    for a, b in zip(loaded, again):
        assert np.array_equal(a.mfcc, b.mfcc) and np.array_equal(a.ema, b.ema)


def test_hand_written_fixture(tmp_path):
    row0 = " ".join(["0.5"] * 13 + ["-1.25"] * 12 + ["1"])
    row1 = " ".join([str(i) for i in range(13)] + ["1e-3"] * 12 + ["0"])
    (tmp_path / "u1.utt").write_text(f"frames=2 subject=S7 phoneme_table=a,b\n{row0}\n{row1}\n")
    (tmp_path / "m.txt").write_text("u1.utt\n")
    (utt,) = load_corpus(tmp_path / "m.txt")
    assert utt.id == "u1" and utt.subject == "S7" and utt.phoneme_table == ["a", "b"]
    assert utt.frames == 2 and list(utt.labels) == [1, 0]
    assert np.array_equal(utt.mfcc[1], np.arange(13.0))
    assert np.all(utt.ema[0] == -1.25) and np.all(utt.ema[1] == 0.001)


def test_missing_file_named(tmp_path):
    (tmp_path / "m.txt").write_text("nowhere.utt\n")
    with pytest.raises(CorpusFormatError, match="nowhere.utt"):
        load_corpus(tmp_path / "m.txt")


@pytest.mark.parametrize(
    "body, match",
    [
        ("frames=1 subject=s phoneme_table=a\n1 2 3\n", r"u\.utt:2: expected 26 fields"),
        ("frames=2 subject=s phoneme_table=a\n" + " ".join(["0"] * 26) + "\n", "header says 2 frames but 1 rows"),
        ("frames=1 subject=s\n" + " ".join(["0"] * 26) + "\n", "header lacks"),
        ("frames=1 subject=s phoneme_table=a\n" + " ".join(["x"] * 26) + "\n", r"u\.utt:2:"),
        ("frames=1 subject=s phoneme_table=a\n" + " ".join(["0"] * 25 + ["3"]) + "\n", "label 3 outside"),
    ],
)
def test_malformed_files(tmp_path, body, match):
    path = tmp_path / "u.utt"
    path.write_text(body)
    with pytest.raises(CorpusFormatError, match=match):
        read_utterance(path)


def test_utterance_rejects_frame_mismatch():
    with pytest.raises(ValueError, match="frame counts"):
        Utterance("x", "s", np.zeros((3, 13)), np.zeros((2, 12)), np.zeros(3, int), ["a"])


# --- batching ---------------------------------------------------------------


def _utt(n, seed, table=("a", "b", "c")):
    rng = np.random.default_rng(seed)
    return Utterance(f"u{seed}", "s", rng.normal(size=(n, 13)), rng.normal(size=(n, 12)), rng.integers(0, 3, n), list(table))


def test_single_utterance_batch():
    (b,) = make_batches([_utt(4, 0)], 1)
    assert b.mask.shape == (1, 4) and np.all(b.mask == 1)


def test_padding_arithmetic():
    (b,) = make_batches([_utt(3, 0), _utt(5, 1)], 2)
    assert b.mfcc.shape == (2, 5, 13)
    assert b.mask[0].sum() == 3 and b.mask[1].sum() == 5
    assert np.all(b.mfcc[0, 3:] == 0) and np.all(b.ema[0, 3:] == 0) and np.all(b.labels[0, 3:] == 0)


def test_batching_errors_and_determinism():
    with pytest.raises(ValueError):
        make_batches([], 2)
    with pytest.raises(ValueError):
        make_batches([_utt(3, 0)], 0)
    corpus = [_utt(3 + i, i) for i in range(7)]
    ids = lambda bs: [b.ids for b in bs]
    assert ids(make_batches(corpus, 3, 11)) == ids(make_batches(corpus, 3, 11))
    assert ids(make_batches(corpus, 3, 11)) != ids(make_batches(corpus, 3, 12))
    bucketed = make_batches(corpus, 3, None, bucket_by_length=True)
    assert [b.mask.shape[1] for b in bucketed] == [5, 8, 9]


def test_masked_losses_match_per_utterance():
    utts = [_utt(3, 0), _utt(5, 1), _utt(4, 2)]
    (b,) = make_batches(utts, 3)
    rng = np.random.default_rng(9)
    pred = rng.normal(size=b.ema.shape)
    logits = rng.normal(size=b.ema.shape[:2] + (3,))
    mse_batch = ad.mse_loss(ad.Tensor(pred), b.ema, b.mask).item()
    ce_batch = ad.cross_entropy_loss(ad.Tensor(logits), b.labels, b.mask).item()
    n = np.array([u.frames for u in utts], dtype=float)
    mse_each = [ad.mse_loss(ad.Tensor(pred[i, : u.frames]), u.ema).item() for i, u in enumerate(utts)]
    ce_each = [ad.cross_entropy_loss(ad.Tensor(logits[i, : u.frames]), u.labels).item() for i, u in enumerate(utts)]
    # masked means weight each utterance by its frame count
    assert abs(mse_batch - np.dot(mse_each, n) / n.sum()) < 1e-12
    assert abs(ce_batch - np.dot(ce_each, n) / n.sum()) < 1e-12
    # equal lengths: plain average
    eq = [_utt(4, 5), _utt(4, 6)]
    (b2,) = make_batches(eq, 2)
    p2 = rng.normal(size=b2.ema.shape)
    each = [ad.mse_loss(ad.Tensor(p2[i]), u.ema).item() for i, u in enumerate(eq)]
    assert abs(ad.mse_loss(ad.Tensor(p2), b2.ema, b2.mask).item() - np.mean(each)) < 1e-12


def test_norm_stats(spec, corpus200):
    stats = NormStats.fit(corpus200)
    z = np.concatenate([stats.apply(u).ema for u in corpus200])
    assert np.allclose(z.mean(axis=0), 0, atol=1e-12) and np.allclose(z.std(axis=0), 1, atol=1e-12)
