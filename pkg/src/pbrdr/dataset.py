"""The (outcome, treatment, covariates) triple that every fit consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    """Analysis units: outcome vector ``y``, binary treatment ``a``, covariate matrix ``x``.

    ``a`` must contain only 0/1 values. Covariates may be empty (``p == 0``),
    in which case every model is intercept-only. All entries must be finite.
    Propensity-model fitters additionally require both treatment arms to be
    present; that is checked by the fitters, not here, so that estimators
    which are well defined on a single arm (e.g. an all-treated inverse
    weighting example) still work.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.a = np.asarray(self.a, dtype=np.float64).ravel()
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        self.x = x
        n = self.y.shape[0]
        if self.a.shape[0] != n or self.x.shape[0] != n:
            raise ValueError(
                f"inconsistent lengths: y has {n}, a has {self.a.shape[0]}, x has {self.x.shape[0]} rows"
            )
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x))):
            raise ValueError("y and x must contain only finite values")
        if not np.all((self.a == 0.0) | (self.a == 1.0)):
            raise ValueError("treatment vector must contain only 0/1 values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_treated(self) -> int:
        return int(np.sum(self.a == 1.0))

    def design(self) -> np.ndarray:
        """Return the (n, p+1) design matrix with a leading intercept column."""
        return np.hstack([np.ones((self.n, 1)), self.x])

    def swap_treatment(self) -> "Dataset":
        """Recode the treatment (0 <-> 1), used for the second counterfactual arm."""
        return Dataset(self.y.copy(), 1.0 - self.a, self.x.copy())
