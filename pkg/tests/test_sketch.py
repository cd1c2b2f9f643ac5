import numpy as np
import pytest

from qjl.estimator import estimate_inner_product, quantize_key, sketch_query
from qjl.sketch import derive_seed, generate_gaussian, orthogonalize, rng_from_seed


def test_single_draw_deterministic():
    first = generate_gaussian(1, 1, 42)
    second = generate_gaussian(1, 1, 42)
    assert first.entries[0, 0] == second.entries[0, 0]


def test_bit_identical_reproduction():
    first = generate_gaussian(16, 48, 1234)
    second = generate_gaussian(16, 48, 1234)
    assert np.array_equal(first.entries, second.entries)
    assert first.seed == 1234 and not first.orthogonalized


def test_seed_sensitivity():
    assert not np.array_equal(
        generate_gaussian(2, 3, 1).entries, generate_gaussian(2, 3, 2).entries
    )


@pytest.mark.parametrize("m,d", [(0, 4), (4, 0), (0, 0), (-1, 3)])
def test_invalid_dimensions_rejected(m, d):
    with pytest.raises(ValueError):
        generate_gaussian(m, d, 0)


def test_gaussian_moments():
    # 10^4 draws: 5-sigma bands are 5/sqrt(N) for the mean and
    # 5*sqrt(2/N) for the sample variance of a standard normal.
    entries = generate_gaussian(100, 100, 7).entries
    assert abs(entries.mean()) <= 0.05
    assert abs(entries.var() - 1.0) <= 5 * np.sqrt(2 / entries.size)


def test_entries_are_read_only():
    sketch = generate_gaussian(2, 2, 0)
    with pytest.raises(ValueError):
        sketch.entries[0, 0] = 1.0


def test_derive_seed_is_deterministic_and_spreads():
    assert derive_seed(1, 0) == derive_seed(1, 0)
    children = {derive_seed(1, stream) for stream in range(1000)}
    assert len(children) == 1000
    assert derive_seed(1, 0) != derive_seed(2, 0)


def test_orthogonalize_two_rows():
    ortho = orthogonalize(generate_gaussian(2, 4, 5))
    r0, r1 = ortho.entries
    assert abs(r0 @ r1) <= 1e-6 * np.linalg.norm(r0) * np.linalg.norm(r1)


def test_orthogonalize_single_row_rescales_input():
    sketch = generate_gaussian(1, 4, 5)
    ortho = orthogonalize(sketch)
    row = sketch.entries[0]
    expected = row * (2.0 / np.linalg.norm(row))
    np.testing.assert_allclose(ortho.entries[0], expected, rtol=1e-12)
    assert abs(np.linalg.norm(ortho.entries[0]) - 2.0) <= 1e-12


def test_orthogonalize_blockwise():
    # m > d: rows 0..3 form one orthogonal block, rows 4..5 another.
    ortho = orthogonalize(generate_gaussian(6, 4, 11)).entries
    for block in (ortho[:4], ortho[4:]):
        gram = block @ block.T
        off_diagonal = gram - np.diag(np.diag(gram))
        assert np.abs(off_diagonal).max() <= 1e-6 * np.abs(np.diag(gram)).min()


def test_orthogonalize_row_norms_sqrt_d():
    for m, d in ((3, 8), (8, 8), (20, 8)):
        ortho = orthogonalize(generate_gaussian(m, d, 9))
        norms = np.linalg.norm(ortho.entries, axis=1)
        np.testing.assert_allclose(norms, np.sqrt(d), rtol=1e-6)


def test_orthogonalize_deterministic_and_flagged():
    sketch = generate_gaussian(4, 16, 77)
    first = orthogonalize(sketch)
    second = orthogonalize(sketch)
    assert np.array_equal(first.entries, second.entries)
    assert first.orthogonalized and first.seed == 77


def test_orthogonalized_estimator_stays_unbiased():
    # Statistical check on a fixed random unit pair: the orthogonalized
    # sketch keeps the estimator mean within 4 standard errors of <q, k>.
    d, m, trials = 32, 16, 10000
    rng = rng_from_seed(derive_seed(2024, 1 << 40))
    query = rng.standard_normal(d)
    key = rng.standard_normal(d)
    query /= np.linalg.norm(query)
    key /= np.linalg.norm(key)
    estimates = np.empty(trials)
    for t in range(trials):
        sketch = orthogonalize(generate_gaussian(m, d, derive_seed(2024, t)))
        estimates[t] = estimate_inner_product(
            sketch_query(sketch, query), quantize_key(sketch, key)
        )
    stderr = estimates.std(ddof=1) / np.sqrt(trials)
    assert abs(estimates.mean() - query @ key) <= 4 * stderr
