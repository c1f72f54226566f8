import numpy as np
import pytest

from mfcontrol.quantize import Grid, Grids


class StubKernels:
    """Hand-built transition tables standing in for Monte-Carlo estimates."""

    def __init__(self, grids, hidden=None, obs=None):
        self.grids = grids
        self._hidden = hidden or {}
        self._obs = obs or {}

    def set_hidden(self, n, control_index, matrix):
        self._hidden[(n, control_index)] = np.asarray(matrix, dtype=float)

    def set_obs(self, n, obs_index, control_index, table):
        self._obs[(n, obs_index, control_index)] = np.asarray(table, dtype=float)

    def hidden_matrix(self, n, control_index, law):
        return self._hidden[(n, control_index)]

    def hidden_row(self, n, i, control_index, law):
        return self._hidden[(n, control_index)][i]

    def obs_table(self, n, obs_index, control_index):
        return self._obs[(n, obs_index, control_index)]


@pytest.fixture
def two_point_grids():
    g = Grid([[-1.0], [1.0]])
    return Grids(g, g, 3)


def uniform_obs_table(n_grid):
    return np.full((n_grid, n_grid), 1.0 / n_grid)
