import json

import numpy as np
import pytest

from dlcert.datamodel import (
    CertDataset,
    CertRecord,
    DatasetError,
    DatasetSchema,
    LatentGaussian,
    OperatingRange,
    dumps_record,
    load_dataset,
    parse_record,
    write_dataset,
)
from dlcert.statdist import Normal, NormalArray


def _line(i, k=2, l=1, latents=None, **extra):
    rec = {"id": f"r{i}", "v_content": [0.1 * i] * k, "v_style": [1.0] * l, "y_obs": [float(i)]}
    if latents is not None:
        rec["latents"] = latents
    rec.update(extra)
    return json.dumps(rec)


def test_three_line_file(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(_line(i) for i in range(3)) + "\n")
    ds = load_dataset(p)
    assert ds.n == 3 and (ds.k, ds.l, ds.m) == (2, 1, 1)
    assert ds.ids == ("r0", "r1", "r2")


def test_zero_sigma_latent_names_line_and_field(tmp_path):
    good = [[{"mu": 0.0, "sigma": 1.0}] * 3] * 3
    bad = [[{"mu": 0.0, "sigma": 1.0}] * 3, [{"mu": 0.0, "sigma": 1.0}] * 3, [{"mu": 0.0, "sigma": 0.0}] + [{"mu": 0.0, "sigma": 1.0}] * 2]
    lines = [_line(i, latents=good) for i in range(16)] + [_line(16, latents=bad)]
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"latents\[2\]\[0\]\.sigma must be > 0 \(line 17\)"):
        load_dataset(p)


def test_dimension_mismatch(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_line(0) + "\n" + _line(1, k=3) + "\n")
    with pytest.raises(DatasetError, match="dimension mismatch: v_content"):
        load_dataset(p)
    with pytest.raises(DatasetError, match="dimension mismatch"):
        parse_record(_line(0, k=3), 1, DatasetSchema(k=2))


@pytest.mark.parametrize("text,msg", [
    ("{not json", "malformed JSON"),
    ('{"id": "a", "v_content": [1, "x"], "v_style": [], "y_obs": [1]}', "v_content"),
    ('{"id": "a", "v_content": [NaN], "v_style": [], "y_obs": [1]}', "v_content"),
    ('{"id": "a", "v_content": [1], "v_style": [], "y_obs": [1], "y_pred": [{"type": "normal", "params": {"mu": 0, "sigma": -1}}]}', "y_pred"),
])
def test_malformed_records(text, msg):
    with pytest.raises(DatasetError, match=msg):
        parse_record(text, 4)


def test_duplicate_ids_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(_line(0) + "\n" + _line(0) + "\n")
    with pytest.raises(DatasetError, match="duplicate id"):
        load_dataset(p)


def test_missing_style_labels_become_nan():
    rec = parse_record('{"id": "a", "v_content": [1], "v_style": [null, 2.0], "y_obs": [0]}')
    ds = CertDataset.from_records([rec])
    assert np.isnan(ds.v_style[0, 0]) and ds.v_style[0, 1] == 2.0


def test_roundtrip_is_byte_identical(tmp_path):
    recs = [
        CertRecord(f"x{i}", (0.5 * i, -1.25), (None if i % 2 else 3.0,), (float(i),),
                   (Normal(0.1 * i, 1.5),), ((LatentGaussian(0.1, 0.9),) * 3, (LatentGaussian(-0.2, 1.1),) * 3))
        for i in range(5)
    ]
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    p1.write_text("".join(dumps_record(r) + "\n" for r in recs), encoding="utf-8")
    write_dataset(load_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_dataset_subset_and_predictions():
    ds = CertDataset(ids=["a", "b", "c"], v_content=[[1.0], [2.0], [3.0]], v_style=np.empty((3, 0)),
                     y_obs=[[0.0], [1.0], [2.0]])
    assert not ds.has_predictions
    with_p = ds.with_predictions([NormalArray([0, 1, 2], [1, 1, 1])])
    sub = with_p.subset([2, 0])
    assert sub.ids == ("c", "a")
    assert np.array_equal(sub.prediction_means(0), [2.0, 0.0])
    assert ds.v_content.flags.writeable is False


def test_operating_range_validation():
    r = OperatingRange.from_pairs([(-10, 10), (-15, 15)])
    assert len(r) == 2 and r[1] == (-15, 15)
    with pytest.raises(ValueError):
        OperatingRange([1.0], [1.0])


def test_latent_gaussian_validation():
    with pytest.raises(ValueError):
        LatentGaussian(0.0, 0.0)
    with pytest.raises(ValueError):
        LatentGaussian(float("inf"), 1.0)
