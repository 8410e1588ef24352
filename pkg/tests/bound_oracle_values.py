"""Bound values from an independent 50-digit mpmath evaluation, frozen before the build.

Each entry: (alpha, L, beta, c, n, T, k, s) -> (convex, nonconvex).
"""

CASES = [
    ((0.01, 1, 1, 1, 101, 10**4, 1, 1), (1.98009900990099, 5.45401270879271)),
    ((0.01, 1, 1, 1, 100, 1000, 1, 1), (0.1999, 1.74213157043329)),
    ((0.05, 2.5, 3, 0.5, 1000, 5000, 10, 0.3), (0.9365625, 0.0328817483453344)),
    ((0.001, 0.7, 40, 0.2, 50, 10**6, 100, 0.9), (17.639118, 21.120874637451)),
    ((0.1, 3, 0.5, 4, 2, 200, 200, 0.01), (0.9, 8.27749109237363)),
    ((0.02, 1.3, 7, 2, 60000, 10**5, 5, 0.5), (0.056331925, 4.73424428631361)),
    ((0.3, 0.1, 2, 10, 10**7, 10**8, 1000, 1), (0.0599997, 10.1944888216765)),
    ((1e-4, 10, 100, 0.05, 500, 123457, 37, 0.75), (3.703155, 4.6895836107588)),
    ((0.5, 1, 4, 3, 3, 10, 3, 0.999), (2.8305, 53.899209130375)),
    ((0.007, 4.2, 0.9, 25, 12345, 10**7, 64, 0.2), (40.0095925035237, 4367786.22795162)),
]
