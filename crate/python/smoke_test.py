"""Quick end-to-end check of the Python extension module."""

import math

import neoclassical as nc


def one_way():
    y = [4.1, 5.0, 4.6, 6.9, 7.4, 7.1, 5.2, 5.9, 5.5, 8.8, 8.1, 8.4]
    d = nc.Design(len(y))
    d.add_factor("A", [f"g{i // 3}" for i in range(len(y))])
    return d, y


def main():
    assert nc.parse_mean("1+A +  x") == "1 + A + x"
    assert nc.parse_cov("I+E(A.B)") == "I + E(A.B)"
    try:
        nc.parse_mean("1 + + A")
    except ValueError as e:
        assert "offset" in str(e)
    else:
        raise AssertionError("bad formula accepted")

    d, y = one_way()
    assert d.block_relation("A")[0][:4] == [1.0, 1.0, 1.0, 0.0]
    assert d.is_ring("A") and d.is_ring("1 + A")

    report = nc.identify(d, "1", "I + E(A)")
    assert report["all_identifiable"], report

    m = 3
    groups = [y[i:i + m] for i in range(0, len(y), m)]
    means = [sum(g) / m for g in groups]
    grand = sum(y) / len(y)
    msw = sum((v - mu) ** 2 for g, mu in zip(groups, means) for v in g) / (len(y) - len(groups))
    msb = m * sum((mu - grand) ** 2 for mu in means) / (len(groups) - 1)

    fit = nc.fit(d, y, "1", "I + E(A)")
    assert fit.converged
    s2, sb2 = fit.components
    assert math.isclose(s2, msw, rel_tol=1e-8)
    assert math.isclose(sb2, (msb - msw) / m, rel_tol=1e-8)

    shrink = m * sb2 / (s2 + m * sb2)
    for e, mu in zip(fit.effects("A"), means):
        assert math.isclose(e["point"], shrink * (mu - fit.beta[0]), rel_tol=1e-8)
    new = fit.predict(f"A={nc.NEW}")
    assert math.isclose(new["point"], fit.beta[0], rel_tol=1e-12)
    c = fit.contrast("A=g1", "A=g0")
    assert c["point"] > 0 and c["se"] > 0

    x = [float(i) for i in range(6)]
    ys = [math.sin(1.3 * v) for v in x]
    ds = nc.Design(6)
    ds.add_covariate("x", x)
    spline = nc.fit(ds, ys, "1 + x", "I + spl3(x)")
    grid = [-1.0 + 0.01 * i for i in range(701)]
    diag = spline.spline_check("x", grid)
    assert diag["third_derivative_variation"] < 1e-3, diag

    assert nc.span_equal(ds, "I + slope(x)", "I + slope(x)")
    assert len(nc.generator_matrix(ds, "bm(x)")) == 6

    tab = nc.periodogram([1.0, 0.0, -1.0, 0.0])
    assert math.isclose(tab["rows"][0]["ss"], 2.0)
    yt = nc.yates([1.0, 2.0, 3.0, 4.0])
    assert [e["value"] for e in yt["entries"]] == [10.0, 2.0, 4.0, 0.0]

    try:
        nc.fit(d, y, "A", "I + E(A)")
    except nc.ModelError:
        pass
    else:
        raise AssertionError("aliased fit accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
