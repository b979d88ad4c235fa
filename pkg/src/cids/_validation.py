"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError


def check_states(X, n_features=None, name="states"):
    """2-D float64 array of states, optionally with a fixed number of columns."""
    X = check_array(X, dtype=np.float64, ensure_2d=False)
    if X.ndim == 1:
        X = X[None, :]
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} have {X.shape[1]} features, expected {n_features}")
    return X


def transitions_from(data):
    """Return ``(states, actions, next_states, episode_ids_or_None)`` from a log or tuple."""
    if hasattr(data, "next_states") and hasattr(data, "episode"):
        return data.states, data.actions, data.next_states, data.episode
    if hasattr(data, "next_states"):
        return data.states, data.actions, data.next_states, None
    try:
        S, A, S1 = data
    except (TypeError, ValueError) as exc:
        raise DataError("expected a TrajectoryLog or a (states, actions, next_states) tuple") from exc
    S = check_array(S, dtype=np.float64)
    A = check_array(A, dtype=np.float64)
    S1 = check_array(S1, dtype=np.float64)
    if not (len(S) == len(A) == len(S1)) or S.shape != S1.shape:
        raise DataError("states, actions and next_states disagree in length or width")
    return S, A, S1, None
