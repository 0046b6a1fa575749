import math
import xml.etree.ElementTree as ET
from itertools import combinations

import numpy as np
import pytest

from reidalign import alignment as al
from reidalign import autodiff as ad


def enumerate_monotone_paths(h):
    """All monotone lattice paths (0,0) -> (h-1,h-1) as index tuples."""
    # a path is determined by which of the 2h-2 moves are "down"
    moves = 2 * h - 2
    for downs in combinations(range(moves), h - 1):
        i = j = 0
        steps = [(0, 0)]
        for m in range(moves):
            if m in downs:
                i += 1
            else:
                j += 1
            steps.append((i, j))
        yield steps


def brute_force_local_distance(d):
    return min(sum(d[i, j] for i, j in p) for p in enumerate_monotone_paths(d.shape[0]))


def test_squash_values_match_closed_form():
    # x = ln 3 -> (3-1)/(3+1) = 0.5 ; x = 10 -> tanh(5), strictly below 1
    assert al.squash_distance(math.log(3.0)) == pytest.approx(0.5, abs=1e-12)
    d10 = float(al.squash_distance(10.0))
    assert d10 == pytest.approx(0.99991, abs=1e-5)
    assert d10 < 1.0


def test_part_distance_matrix_zero_and_bounds():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(5, 4))
    d = al.part_distance_matrix(f, f)
    assert np.all(np.diag(d) <= 1e-6)
    g = rng.normal(size=(5, 4))
    d2 = al.part_distance_matrix(f, g)
    assert np.all(d2 >= 0.0) and np.all(d2 < 1.0)


def test_part_distance_matrix_rejects_mismatched_h():
    with pytest.raises(ValueError, match="share a shape"):
        al.part_distance_matrix(np.zeros((4, 3)), np.zeros((5, 3)))


def test_shortest_path_h1_and_h2_closed_forms():
    single = al.shortest_path(np.array([[0.3]]))
    assert single.total == pytest.approx(0.3)
    assert single.path.steps == ((0, 0),)

    d = np.array([[0.1, 0.7], [0.2, 0.4]])
    got = al.shortest_path(d)
    assert got.total == pytest.approx(0.1 + min(0.7, 0.2) + 0.4, abs=1e-15)
    assert got.path.steps == ((0, 0), (1, 0), (1, 1))


def test_shortest_path_rejects_empty_or_non_square():
    with pytest.raises(ValueError):
        al.shortest_path(np.zeros((0, 0)))
    with pytest.raises(ValueError):
        al.shortest_path(np.zeros((2, 3)))


def test_shortest_path_matches_enumeration_oracle():
    rng = np.random.default_rng(123)
    for _ in range(60):
        h = int(rng.integers(1, 7))
        d = rng.uniform(0.0, 1.0, size=(h, h))
        got = al.shortest_path(d)
        want = brute_force_local_distance(d)
        assert abs(got.total - want) < 1e-12
        # the returned path must realize the optimum
        assert sum(d[i, j] for i, j in got.path.steps) == pytest.approx(got.total)


def test_path_invariants():
    rng = np.random.default_rng(5)
    d = rng.uniform(size=(6, 6))
    path = al.shortest_path(d).path
    assert path.steps[0] == (0, 0)
    assert path.steps[-1] == (5, 5)
    assert len(path.steps) == 11
    for (i0, j0), (i1, j1) in zip(path.steps, path.steps[1:]):
        assert (i1 - i0, j1 - j0) in ((0, 1), (1, 0))


def test_tie_break_prefers_step_from_above():
    # all-equal 2x2 ties: the final cell must be entered from above, i.e.
    # its predecessor is (0, 1)
    d = np.full((2, 2), 0.5)
    path = al.shortest_path(d).path
    assert path.steps == ((0, 0), (0, 1), (1, 1))


def test_local_distance_symmetry_and_bound():
    rng = np.random.default_rng(99)
    for _ in range(25):
        h = int(rng.integers(1, 7))
        f = rng.normal(size=(h, 3))
        g = rng.normal(size=(h, 3))
        fg = al.shortest_path(al.part_distance_matrix(f, g)).total
        gf = al.shortest_path(al.part_distance_matrix(g, f)).total
        assert abs(fg - gf) < 1e-12
        assert 0.0 <= fg < 2 * h - 1


def test_batch_shortest_path_matches_single():
    rng = np.random.default_rng(11)
    stack = rng.uniform(size=(4, 5, 5, 5))
    totals, mask = al.batch_shortest_path(stack)
    for a in range(4):
        for b in range(5):
            single = al.shortest_path(stack[a, b])
            assert totals[a, b] == pytest.approx(single.total, abs=1e-12)
            want_mask = np.zeros((5, 5), dtype=bool)
            for i, j in single.path.steps:
                want_mask[i, j] = True
            assert np.array_equal(mask[a, b], want_mask)


def test_shortest_path_backward_is_path_indicator():
    d = np.array([[0.1, 0.2], [0.9, 0.4]])
    res = al.shortest_path(d)
    grad = al.shortest_path_backward(d, res.path, 2.0)
    want = np.array([[2.0, 2.0], [0.0, 2.0]])
    assert np.array_equal(grad, want)


def test_shortest_path_backward_h1():
    res = al.shortest_path(np.array([[0.7]]))
    grad = al.shortest_path_backward(np.array([[0.7]]), res.path, 3.0)
    assert np.array_equal(grad, [[3.0]])


def test_local_distance_node_fd_check():
    rng = np.random.default_rng(21)
    for _ in range(5):
        d0 = rng.uniform(0.05, 0.95, size=(5, 5))
        report = ad.grad_check(
            lambda t, x: al.local_distance_node(x), d0, tol=1e-6
        )
        assert report.passed, report.max_rel_err


def test_local_distance_grad_zero_off_path():
    rng = np.random.default_rng(3)
    d0 = rng.uniform(0.05, 0.95, size=(6, 6))
    tape = ad.Tape()
    dn = tape.leaf(d0)
    grads = ad.backprop(al.local_distance_node(dn))
    grad = ad.grad_wrt(grads, dn)
    path = al.shortest_path(d0).path
    on = np.zeros_like(d0, dtype=bool)
    for i, j in path.steps:
        on[i, j] = True
    assert np.all(grad[~on] == 0.0)
    assert np.all(grad[on] == 1.0)


def test_global_distance_values():
    assert al.global_distance([0.0, 0.0], [3.0, 4.0]) == pytest.approx(5.0, abs=1e-9)
    a = np.array([1.0, 2.0, 3.0])
    assert al.global_distance(a, a) <= 1e-6
    b = np.array([-1.0, 0.5, 2.0])
    assert al.global_distance(a, b) == al.global_distance(b, a)
    with pytest.raises(ValueError, match="global_distance"):
        al.global_distance([1.0], [1.0, 2.0])


def test_render_alignment_wellformed_and_diagonal_emphasis():
    rng = np.random.default_rng(17)
    f = rng.normal(size=(7, 3))
    res = al.shortest_path(al.part_distance_matrix(f, f))
    svg = al.render_alignment(f, f, res.path, title="identical pair")
    root = ET.fromstring(svg)
    lines = [el for el in root.iter() if el.tag.endswith("line")]
    assert len(lines) == len(res.path.steps)
    widths = [float(el.attrib["stroke-width"]) for el in lines]
    thickest = res.path.steps[int(np.argmax(widths))]
    assert thickest[0] == thickest[1]

    single = al.shortest_path(np.array([[0.2]]))
    svg1 = al.render_alignment(np.zeros((1, 3)), np.zeros((1, 3)), single.path)
    root1 = ET.fromstring(svg1)
    assert sum(1 for el in root1.iter() if el.tag.endswith("line")) == 1


def test_path_dump_format():
    d = np.array([[0.1, 0.2], [0.9, 0.4]])
    res = al.shortest_path(d)
    dump = al.path_dump(d, res.path)
    rows = dump.splitlines()
    assert rows[0] == "0,0,0.100000"
    assert len(rows) == 3


def test_stripe_features_shape_and_pooling():
    img = np.zeros((3, 56, 8))
    img[:, 8:16, :] = 1.0  # second stripe fully lit
    feats = al.stripe_features(img, 7)
    assert feats.shape == (7, 3)
    assert np.allclose(feats[1], 1.0)
    assert np.allclose(feats[0], 0.0)
    with pytest.raises(ValueError, match="divisible"):
        al.stripe_features(img, 5)
