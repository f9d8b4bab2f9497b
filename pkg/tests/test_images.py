import numpy as np
import pytest

from tablewipe.env import render_observation
from tablewipe.images import (
    density_grid,
    grid_to_raster,
    mask_from_pgm,
    observation_to_pgm,
    raster_to_grid,
    read_pgm,
    write_pgm,
)
from tablewipe.sde import ConfigError, ParticleCloud, TableGeometry

TABLE = TableGeometry()


def one_particle(x, y):
    return ParticleCloud(np.array([x]), np.array([y]), np.zeros(1, np.uint8))


class TestRasterConvention:
    def test_top_row_is_high_y(self):
        # a particle near the table's far y edge must land in the top raster row
        obs = render_observation(one_particle(0.5, 0.99), TABLE)
        img = grid_to_raster(obs.grid)
        r, c = np.argwhere(img > 0)[0]
        assert r == 0
        assert c == 32

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        grid = (rng.random((64, 64)) > 0.7).astype(np.float64)
        assert np.array_equal(raster_to_grid(grid_to_raster(grid)), grid)


class TestPgmIO:
    def test_write_read_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        grid = (rng.random((64, 64)) > 0.5).astype(np.float64)
        path = tmp_path / "img.pgm"
        write_pgm(path, grid, "seed=1")
        back = read_pgm(path)
        assert np.array_equal(back, grid)
        text = path.read_text()
        assert text.startswith("P2")
        assert "# seed=1" in text

    def test_read_p5_binary(self, tmp_path):
        img = np.arange(6, dtype=np.uint8).reshape(2, 3)
        raw = b"P5\n# binary comment\n3 2\n255\n" + img.tobytes()
        path = tmp_path / "bin.pgm"
        path.write_bytes(raw)
        back = read_pgm(path)
        assert np.array_equal(back, raster_to_grid(img.astype(np.float64) / 255.0))

    def test_read_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P9\n1 1\n255\n0\n")
        with pytest.raises((ConfigError, ValueError)):
            read_pgm(path)

    def test_observation_to_pgm(self, tmp_path):
        obs = render_observation(one_particle(0.5, 0.5), TABLE)
        path = tmp_path / "obs.pgm"
        observation_to_pgm(path, obs, "hash=x")
        grid = read_pgm(path)
        assert grid.shape == (64, 64)
        assert grid[32, 32] == 1.0
        # raster row 31 (top-down) carries the iy=32 pixel
        raw = path.read_text().splitlines()
        assert "hash=x" in raw[1]


class TestMaskIngestion:
    def write_mask(self, tmp_path, set_pixels):
        grid = np.zeros((64, 64))
        for ix, iy in set_pixels:
            grid[ix, iy] = 1.0
        path = tmp_path / "mask.pgm"
        write_pgm(path, grid, "mask")
        return path

    def test_mask_round_trip_orientation(self, tmp_path):
        path = self.write_mask(tmp_path, [(10, 20)])
        mask = mask_from_pgm(path)
        assert mask.dtype == bool
        assert mask[10, 20]
        assert mask.sum() == 1

    def test_threshold(self, tmp_path):
        grid = np.zeros((64, 64))
        grid[5, 5] = 1.0
        path = tmp_path / "faint.pgm"
        # scale down to a faint value below the default threshold
        write_pgm(path, grid * 0.3, "faint")
        assert mask_from_pgm(path).sum() == 0
        assert mask_from_pgm(path, threshold=0.2).sum() == 1

    def test_inflation_dilates(self, tmp_path):
        path = self.write_mask(tmp_path, [(30, 30)])
        mask = mask_from_pgm(path, inflate_px=1)
        assert mask.sum() == 9  # 3x3 square neighborhood
        assert mask[29, 29] and mask[31, 31]

    def test_wrong_size_rejected(self, tmp_path):
        img = np.zeros((32, 32), dtype=np.uint8)
        raw = b"P5\n32 32\n255\n" + img.tobytes()
        path = tmp_path / "small.pgm"
        path.write_bytes(raw)
        with pytest.raises(ConfigError):
            mask_from_pgm(path)


class TestDensity:
    def test_density_peak_normalized(self):
        cloud = ParticleCloud(
            np.full(100, 0.5), np.full(100, 0.5), np.zeros(100, np.uint8)
        )
        grid = density_grid(cloud, TABLE)
        assert grid.max() == pytest.approx(1.0)
        assert grid[32, 32] == pytest.approx(1.0)

    def test_density_empty_cloud(self):
        cloud = ParticleCloud(
            np.array([0.5]), np.array([0.5]), np.ones(1, np.uint8)
        )
        grid = density_grid(cloud, TABLE)
        assert grid.shape == (64, 64)
        assert grid.max() == 0.0
