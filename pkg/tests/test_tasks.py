import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaocc.tasks import (DataError, EvalTask, FormatDescriptor, MetaSplit, SupportSampling, Task, TaskSplit,
                           denormalize_task, instances_for_task, load_tasks, make_meta_instances, make_test_split,
                           normalize_task, read_split_manifest, write_split_manifest, write_task_csv)


def toy_task(rng, n_pos=30, n_neg=300, n=4, tid="t"):
    x = np.vstack([rng.normal(1.0, 0.5, size=(n_pos, n)), rng.normal(0.0, 2.0, size=(n_neg, n))])
    y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    return Task(tid, x, y)


def test_task_defaults_and_validation(rng):
    t = toy_task(rng, 5, 10)
    assert t.k == 5 and t.m == 15 and t.n_positive == 5 and t.n_negative == 10
    with pytest.raises(DataError):
        Task("x", np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(DataError):
        Task("x", np.zeros((3, 2)), [1, 0])
    with pytest.raises(DataError):
        Task("x", np.zeros((2, 2)), [1, 2])
    with pytest.raises(DataError):
        Task("x", np.zeros((2, 2)), [1, 0], support_idx=[1])


def test_normalize_statistics(rng):
    t = normalize_task(toy_task(rng))
    assert np.abs(t.features.mean(axis=0)).max() < 1e-9
    assert np.abs(t.features.std(axis=0) - 1).max() < 1e-6


def test_normalize_constant_column(rng):
    x = rng.normal(size=(20, 3))
    x[:, 1] = 7.0
    t = normalize_task(Task("c", x, np.r_[np.ones(5, int), np.zeros(15, int)]))
    np.testing.assert_array_equal(t.features[:, 1], 0.0)
    assert t.std[1] == 1.0


def test_normalize_roundtrip_and_idempotence(rng):
    raw = toy_task(rng)
    once = normalize_task(raw)
    twice = normalize_task(once)
    assert np.abs(twice.features - once.features).max() < 1e-9
    assert np.abs(denormalize_task(twice).features - raw.features).max() < 1e-9
    assert denormalize_task(raw) is raw


def test_normalize_needs_two_rows():
    with pytest.raises(DataError):
        normalize_task(Task("one", [[1.0, 2.0]], [1]))


def test_episodic_ratio(rng):
    tasks = [toy_task(rng, 20, 1500, tid=f"t{i}") for i in range(10)]
    inst = make_meta_instances(tasks, imbalance=50, sampling=SupportSampling(8, 20), seed=0)
    assert len(inst) >= 10_000
    assert inst.n_negative / inst.n_positive == pytest.approx(50, rel=0.02)


def test_positive_query_never_in_own_support(rng):
    t = toy_task(rng, 12, 100)
    inst = make_meta_instances([t], imbalance=2, sampling=SupportSampling(3, 11), seed=4)
    seen = 0
    for i, pi in enumerate(inst):
        if pi.label == 1:
            seen += 1
            assert not np.any(np.all(pi.support == pi.query, axis=1))
            assert 3 <= pi.k <= 11
    assert seen == 12


def test_support_sizes_uniform_range(rng):
    t = toy_task(rng, 40, 10)
    rows = np.flatnonzero(t.labels == 0)
    _, sizes = instances_for_task(t, np.repeat(rows, 300), SupportSampling(8, 12), np.random.default_rng(0))
    assert sizes.min() == 8 and sizes.max() == 12
    counts = np.bincount(sizes)[8:]
    assert counts.min() > 0.8 * counts.mean()


def test_supports_are_distinct_rows(rng):
    t = toy_task(rng, 15, 5)
    subsets, sizes = instances_for_task(t, t.query_idx, SupportSampling(5, 14), np.random.default_rng(1))
    for s, n in zip(subsets, sizes):
        assert s.size == n == np.unique(s).size


def test_instance_stream_deterministic(rng):
    tasks = [toy_task(rng, 15, 200, tid=f"t{i}") for i in range(3)]
    a = make_meta_instances(tasks, 10, SupportSampling(4, 10), seed=9)
    b = make_meta_instances(tasks, 10, SupportSampling(4, 10), seed=9)
    np.testing.assert_array_equal(a.support_flat, b.support_flat)
    np.testing.assert_array_equal(a.queries, b.queries)
    c = make_meta_instances(tasks, 10, SupportSampling(4, 10), seed=10)
    assert not np.array_equal(a.support_flat, c.support_flat)


def test_batch_packs_instances(rng):
    tasks = [toy_task(rng, 12, 60, tid=f"t{i}") for i in range(2)]
    inst = make_meta_instances(tasks, 3, SupportSampling(2, 6), seed=0)
    idx = np.array([5, 0, len(inst) - 1])
    rows, q, seg, lab = inst.batch(idx)
    for j, i in enumerate(idx):
        pi = inst.instance(i)
        np.testing.assert_array_equal(rows[seg.offsets[j]:seg.offsets[j] + seg.counts[j]], pi.support)
        np.testing.assert_array_equal(q[j], pi.query)
        assert lab[j] == pi.label


def test_small_tasks_are_skipped(rng, caplog):
    tasks = [toy_task(rng, 4, 50, tid="small"), toy_task(rng, 20, 50, tid="big")]
    inst = make_meta_instances(tasks, 2, SupportSampling(8, 10), seed=0)
    assert inst.task_ids == ["big"]
    assert "small" in caplog.text
    with pytest.raises(DataError):
        make_meta_instances(tasks[:1], 2, SupportSampling(8, 10))


def test_test_split_sizes():
    x = np.zeros((360 + 54_000, 2))
    y = np.r_[np.ones(360, int), np.zeros(54_000, int)]
    sp = make_test_split(Task("s", x, y), 0.1, seed=0)
    assert sp.support.size == 36
    assert sp.baseline_negatives.size == 5400
    assert np.all(y[sp.support] == 1) and np.all(y[sp.baseline_negatives] == 0)
    pos_pool, pos_test = y[sp.pool].sum(), y[sp.final_test].sum()
    assert abs(pos_pool - pos_test) <= 1 and pos_pool + pos_test == 324
    sp.check_partition(y.size)


@given(st.integers(5, 200), st.integers(0, 500), st.integers(0, 1000))
def test_split_partitions_rows(n_pos, n_neg, seed):
    y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    t = Task("p", np.zeros((y.size, 1)), y)
    sp = make_test_split(t, 0.1, seed)
    sp.check_partition(y.size)
    assert np.intersect1d(sp.support, sp.final_test).size == 0
    assert np.intersect1d(sp.pool, sp.final_test).size == 0
    again = make_test_split(t, 0.1, seed)
    for a, b in zip(sp.parts().values(), again.parts().values()):
        np.testing.assert_array_equal(a, b)


def test_split_needs_five_positives():
    with pytest.raises(DataError):
        make_test_split(Task("f", np.zeros((10, 1)), [1] * 4 + [0] * 6))


def test_check_partition_detects_overlap():
    sp = TaskSplit(np.array([0]), np.array([1]), np.array([2]), np.array([2]))
    with pytest.raises(DataError):
        sp.check_partition(4)


def test_eval_task_rows(rng):
    t = toy_task(rng, 20, 100)
    sp = make_test_split(t, 0.1, 0)
    ev = EvalTask.from_task(t, sp)
    X, y = ev.rows("final_test")
    np.testing.assert_array_equal(X, t.features[sp.final_test])
    np.testing.assert_array_equal(sp.train, np.sort(np.r_[sp.support, sp.baseline_negatives]))


def test_split_manifest_roundtrip(tmp_path, rng):
    splits = {"a": make_test_split(toy_task(rng, 10, 40), 0.1, 1), "b": make_test_split(toy_task(rng, 8, 20), 0.1, 2)}
    write_split_manifest(tmp_path / "s.csv", splits)
    back = read_split_manifest(tmp_path / "s.csv")
    for tid in splits:
        for a, b in zip(splits[tid].parts().values(), back[tid].parts().values()):
            np.testing.assert_array_equal(a, b)


def test_meta_split_roundtrip(tmp_path):
    ms = MetaSplit(["a", "b"], ["c"], ["d"])
    ms.write(tmp_path / "m.csv")
    assert MetaSplit.read(tmp_path / "m.csv") == ms
    with pytest.raises(DataError):
        MetaSplit(["a"], ["a"], ["b"])


def test_three_row_csv_with_roles(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("task_id,x,y,role,label\nt,1,2,support,1\nt,3,4,query,0\nt,5,6,query,1\n")
    (t,) = load_tasks(p, FormatDescriptor(role="role"))
    assert (t.k, t.m, t.n_features) == (1, 2, 2)
    np.testing.assert_array_equal(t.query_labels, [0, 1])


def test_bad_label_names_line(tmp_path):
    lines = ["task_id,a,label"] + [f"t,{i}.5,{int(i == 3)}" for i in range(20)]
    lines[16] = "t,9.0,2"  # 17th line of the file
    p = tmp_path / "bad.csv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r":17:"):
        load_tasks(p)


def test_bad_number_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("task_id,a,label\nt,1.0,1\nt,abc,0\n")
    with pytest.raises(DataError, match=r":3: column 'a'"):
        load_tasks(p)


@pytest.mark.parametrize("text, message", [
    ("", "empty"),
    ("task_id,a\nt,1\n", "missing label"),
    ("task_id,label\nt,1\n", "no feature columns"),
    ("task_id,a,label\n", "no data rows"),
    ("task_id,a,label\nt,1,0\n", "no positive"),
])
def test_malformed_files(tmp_path, text, message):
    p = tmp_path / "m.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=message):
        load_tasks(p)


def test_ten_feature_file_and_directory(tmp_path, rng):
    d = tmp_path / "streams"
    d.mkdir()
    tasks = [toy_task(rng, 6, 30, n=10, tid=f"s{i}") for i in range(2)]
    for t in tasks:
        write_task_csv(d / f"{t.task_id}.csv", t)
    loaded = load_tasks(d)
    assert [t.task_id for t in loaded] == ["s0", "s1"]
    assert loaded[0].n_features == 10
    np.testing.assert_array_equal(loaded[1].features, tasks[1].features)
    with pytest.raises(DataError):
        load_tasks(tmp_path / "missing")


def test_format_descriptor_file(tmp_path):
    desc = tmp_path / "fmt.txt"
    desc.write_text("# column roles\nlabel = member\nfeatures = ra, dec\ntask_id = stream\n")
    fmt = FormatDescriptor.read(desc)
    assert fmt.features == ("ra", "dec") and fmt.label == "member"
    p = tmp_path / "streams.csv"
    p.write_text("stream,ra,dec,extra,member\ng,1,2,9,1\ng,3,4,9,0\n")
    (t,) = load_tasks(p, fmt)
    assert t.n_features == 2
    desc.write_text("colour = bp\n")
    with pytest.raises(DataError):
        FormatDescriptor.read(desc)
