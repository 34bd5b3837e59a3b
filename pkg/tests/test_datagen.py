import numpy as np
import pytest

from dpspg.datagen import (
    DatasetSpec,
    generate_dataset,
    leave_one_out_split,
    load_dataset,
    nearest_centroid_accuracy,
    save_dataset,
    subset,
)
from dpspg.errors import InvalidParameter


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(DatasetSpec())


def test_degenerate_no_shift_domains_identical():
    spec = DatasetSpec(noise_sigma=0, domain_shift_scale=0, domain_rotation_angle=0, domain_scale_jitter=0)
    d = generate_dataset(spec)
    per = [d.x[d.domains == k] for k in range(spec.S_total)]
    for k in range(1, spec.S_total):
        assert np.array_equal(per[k], per[0])


def test_generation_is_deterministic(ds):
    again = generate_dataset(DatasetSpec())
    assert np.array_equal(again.x, ds.x)
    assert np.array_equal(again.labels, ds.labels)
    other = generate_dataset(DatasetSpec(seed=1))
    assert not np.array_equal(other.x, ds.x)


def test_class_balance_and_split_partition(ds):
    spec = ds.spec
    for d in range(spec.S_total):
        for c in range(spec.K):
            assert ((ds.domains == d) & (ds.labels == c)).sum() == spec.n_per_class_per_domain
        parts = ds.split[d]
        joined = np.concatenate([parts["train"], parts["val"], parts["test"]])
        assert len(np.unique(joined)) == len(joined)
        assert np.array_equal(np.sort(joined), ds.indices(d))
        # 60/20/20 per cell
        assert len(parts["val"]) == len(parts["test"]) == 8 * spec.K


def test_separable_within_domain(ds):
    for d in range(ds.S_total):
        tr = subset(ds, ds.indices(d, "train"))
        te = subset(ds, ds.indices(d))
        assert nearest_centroid_accuracy(tr, te) >= 0.99


def test_domains_actually_shift(ds):
    # a centroid classifier fitted on one domain loses accuracy on another
    tr = subset(ds, ds.indices(0))
    accs = [nearest_centroid_accuracy(tr, subset(ds, ds.indices(d))) for d in range(1, ds.S_total)]
    assert min(accs) < 0.99


def test_leave_one_out_split(ds):
    src, tgt = leave_one_out_split(ds, 2)
    assert src.domain_ids == (0, 1, 3)
    assert tgt.domain_ids == (2,)
    assert len(np.intersect1d(src.indices, tgt.indices)) == 0
    assert len(src) + len(tgt) == len(ds)
    targets = [leave_one_out_split(ds, t)[1].domain_ids for t in range(ds.S_total)]
    assert sorted(t[0] for t in targets) == list(range(ds.S_total))
    with pytest.raises(InvalidParameter):
        leave_one_out_split(ds, 4)


def test_spec_validation():
    with pytest.raises(InvalidParameter):
        DatasetSpec(S_total=2)
    with pytest.raises(InvalidParameter):
        DatasetSpec(K=1)
    with pytest.raises(InvalidParameter):
        DatasetSpec(val_fraction=0.5, test_fraction=0.5)


def test_file_roundtrip(tmp_path, ds):
    side = save_dataset(ds, tmp_path / "d.csv", {"config_hash": "h"})
    text = (tmp_path / "d.csv").read_text()
    assert text.splitlines()[0] == "domain,label," + ",".join(f"x{j}" for j in range(16))
    back = load_dataset(tmp_path / "d.csv")
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.labels, ds.labels)
    for d in range(ds.S_total):
        assert np.array_equal(back.split[d]["test"], ds.split[d]["test"])
    assert '"config_hash": "h"' in side.read_text()
