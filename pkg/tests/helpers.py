"""Shared data generators for the test-suite."""

import numpy as np

from robust_dta.core import BetweenStudyCov, StudyCounts, StudyData


def random_bnn_data(rng, n=10, mu=(1.0, 1.5), tau=(0.6, 0.5), rho=-0.3, s2_range=(0.05, 0.4)) -> StudyData:
    """Logit-scale data drawn from the bivariate normal-normal model."""
    sigma = BetweenStudyCov.from_tau(tau[0] ** 2, tau[1] ** 2, rho)
    s2 = rng.uniform(*s2_range, size=(n, 2))
    theta = rng.multivariate_normal(mu, sigma.matrix, size=n)
    y = theta + rng.standard_normal((n, 2)) * np.sqrt(s2)
    return StudyData(y, s2, tuple(f"s{i + 1}" for i in range(n)))


def with_outlier(data: StudyData, index=0, shift=(-4.0, 3.0)) -> StudyData:
    y = np.array(data.y)
    y[index] += shift
    return StudyData(y, np.array(data.s2), data.study_ids)


TOY_COUNTS = [
    StudyCounts("s1", 20, 10, 5, 60),
    StudyCounts("s2", 15, 3, 30, 40),
    StudyCounts("s3", 40, 22, 9, 110),
    StudyCounts("s4", 12, 12, 4, 50),
    StudyCounts("s5", 30, 9, 12, 80),
    StudyCounts("s6", 8, 0, 3, 44),
]


def toy_data() -> StudyData:
    return StudyData.from_counts(TOY_COUNTS)
