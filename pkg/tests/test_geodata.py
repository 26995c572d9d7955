import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exposnet.geodata import (BANDS_MHZ, CHANNELS, BsaRecord, BuildingFootprint, GeoDataError,
                              GeoOrigin, GeoRaster, GeoSources, ProjectedFootprint, Tile,
                              antenna_gain, compose_input_tensor, estimate_building_height,
                              project_footprints, project_to_local, rasterize_bsa_heights,
                              rasterize_buildings, rasterize_radiation, read_bsa_csv,
                              read_buildings_csv, read_raster, resample_raster, unproject,
                              write_bsa_csv, write_buildings_csv, write_raster)

import oracles

ORIGIN = GeoOrigin(48.85, 2.35)


@pytest.fixture
def tile():
    return Tile(48.85, 2.35, ORIGIN)


def square(cx, cy, half):
    return np.array([[cx - half, cy - half], [cx + half, cy - half],
                     [cx + half, cy + half], [cx - half, cy + half]])


class TestProjection:
    def test_origin_maps_to_zero(self):
        assert project_to_local(48.85, 2.35, ORIGIN) == (0.0, 0.0)

    def test_one_degree_latitude(self):
        _, y = project_to_local(49.85, 2.35, ORIGIN)
        assert y == pytest.approx(6371000 * math.pi / 180, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-2000, 2000), st.floats(-2000, 2000))
    def test_round_trip(self, x, y):
        lat, lon = unproject(x, y, ORIGIN)
        x2, y2 = project_to_local(lat, lon, ORIGIN)
        assert x2 == pytest.approx(x, abs=1e-6) and y2 == pytest.approx(y, abs=1e-6)


class TestTile:
    def test_geometry(self, tile):
        assert tile.resolution == 3.125
        assert tile.bounds == (-200, -200, 200, 200)

    def test_row_zero_is_north(self, tile):
        xs, ys = tile.pixel_centers()
        assert ys[0, 0] == pytest.approx(200 - 1.5625)
        assert xs[0, 0] == pytest.approx(-200 + 1.5625)
        assert tile.pixel_of(-199, 199) == (0, 0)
        assert tile.pixel_of(199, -199) == (127, 127)
        assert tile.pixel_of(250, 0) is None


class TestBuildings:
    def test_square_pixel_count(self, tile):
        # 100 m square centred on the tile: 32 x 32 pixel centres inside
        out = rasterize_buildings([ProjectedFootprint(square(0, 0, 50), 12.0)], tile)
        assert out.shape == (1, 128, 128)
        assert np.count_nonzero(out) == 32 * 32
        assert out.max() == 12.0

    def test_overlap_keeps_max(self, tile):
        fps = [ProjectedFootprint(square(0, 0, 20), 5.0), ProjectedFootprint(square(10, 0, 20), 9.0)]
        out = rasterize_buildings(fps, tile)[0]
        r, c = tile.pixel_of(5, 0)
        assert out[r, c] == 9.0
        r, c = tile.pixel_of(-15, 0)
        assert out[r, c] == 5.0

    def test_outside_tile_ignored(self, tile):
        out = rasterize_buildings([ProjectedFootprint(square(1000, 0, 20), 9.0)], tile)
        assert not out.any()

    def test_concave_polygon(self):
        t = Tile(48.85, 2.35, ORIGIN, grid=32)
        # L shape, the notch must stay empty
        xy = np.array([[-100, -100], [100, -100], [100, 0], [0, 0], [0, 100], [-100, 100]], float)
        out = rasterize_buildings([ProjectedFootprint(xy, 7.0)], t)[0]
        assert out[t.pixel_of(50, 50)] == 0
        assert out[t.pixel_of(-50, 50)] == 7.0

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_shapely_oracle(self, seed):
        tile, fps, _ = oracles.random_scene(np.random.default_rng(seed), grid=48)
        got = rasterize_buildings(fps, tile)[0]
        assert got.tobytes() == oracles.building_raster(fps, tile).tobytes()


class TestHeights:
    def test_recorded_height_wins(self):
        assert estimate_building_height(BuildingFootprint("a", [(0, 0)] * 3, 11.0, 2)) == 11.0

    def test_floors(self):
        assert estimate_building_height(BuildingFootprint("a", [(0, 0)] * 3, None, 4)) == 12.0

    def test_neighbour_mean_within_radius(self):
        fp = BuildingFootprint("a", [(0, 0)] * 3)
        assert estimate_building_height(fp, [(50, 10.0), (99, 20.0), (150, 90.0)]) == 15.0

    def test_fallback_and_zero(self):
        fp = BuildingFootprint("a", [(0, 0)] * 3)
        assert estimate_building_height(fp, [(150, 90.0)], fallback=8.0) == 8.0
        assert estimate_building_height(fp) == 0.0

    def test_project_footprints_interpolates(self):
        def fp(i, dx, h=None, floors=None):
            lat, lon = unproject(dx, 0.0, ORIGIN)
            d = 1e-5
            return BuildingFootprint(i, [(lat, lon), (lat + d, lon), (lat, lon + d)], h, floors)

        out = project_footprints([fp("a", 0, 10.0), fp("b", 30, None, 2), fp("c", 60),
                                  fp("d", 500)], ORIGIN)
        assert [p.height_m for p in out[:2]] == [10.0, 6.0]
        assert out[2].height_m == pytest.approx(8.0)   # mean of both neighbours
        assert out[3].height_m == pytest.approx(8.0)   # none within 100 m: area mean


class TestGain:
    def test_anchor_values(self):
        assert antenna_gain(0) == 1.0
        assert antenna_gain(90) == 0.0
        assert antenna_gain(45) == 0.0625
        assert antenna_gain(180) == 0.0

    def test_monotone(self):
        g = antenna_gain(np.arange(0, 91))
        assert np.all(np.diff(g) <= 0)

    def test_symmetric_and_periodic(self):
        assert antenna_gain(30) == antenna_gain(-30) == antenna_gain(330)

    def test_matches_cos8(self):
        for d in np.linspace(-89, 89, 37):
            assert antenna_gain(d) == pytest.approx(oracles.cos8_gain(d), rel=1e-12, abs=1e-15)

    def test_beamwidth_rescaling(self):
        from exposnet.geodata import COS8_HPBW_DEG
        assert COS8_HPBW_DEG == pytest.approx(2 * math.degrees(math.acos(0.5 ** 0.125)))
        assert antenna_gain(30.0, beamwidth_deg=60.0) == pytest.approx(0.5)
        assert antenna_gain(COS8_HPBW_DEG / 2) == pytest.approx(0.5)


class TestBsaAndRadiation:
    def bsa(self, x, y, h=30.0, az=0.0, band=700, site="s", cov=None):
        lat, lon = unproject(x, y, ORIGIN)
        return BsaRecord(site, lat, lon, h, az, band, coverage_m=cov)

    def test_single_site_pixel(self, tile):
        out = rasterize_bsa_heights([self.bsa(10, 10, 30.0)], tile)[0]
        assert np.count_nonzero(out) == 1
        assert out[tile.pixel_of(10, 10)] == 30.0

    def test_site_mean_height(self, tile):
        out = rasterize_bsa_heights([self.bsa(10, 10, 30.0), self.bsa(10, 10, 40.0)], tile)[0]
        assert out[tile.pixel_of(10, 10)] == 35.0

    def test_antenna_outside_tile(self, tile):
        assert not rasterize_bsa_heights([self.bsa(500, 0)], tile).any()

    def test_boresight_pixel(self, tile):
        out = rasterize_radiation([self.bsa(0.0, -100.0, az=0.0)], 700, tile)[0]
        xs, ys = tile.pixel_centers()
        r, c = tile.pixel_of(0.5, 50)
        expected = oracles.cos8_gain(math.degrees(math.atan2(xs[r, c], ys[r, c] + 100)))
        assert out[r, c] == pytest.approx(expected, rel=1e-6)
        # behind the antenna is dark
        assert out[tile.pixel_of(0.5, -150)] == 0

    def test_other_band_and_coverage(self, tile):
        assert not rasterize_radiation([self.bsa(0, 0, band=800)], 700, tile).any()
        out = rasterize_radiation([self.bsa(0, -200, cov=100.0)], 700, tile)[0]
        assert out[tile.pixel_of(0.5, 50)] == 0
        assert out[tile.pixel_of(0.5, -150)] > 0

    def test_superposition(self, tile):
        a = self.bsa(0, -100, az=0.0)
        b = self.bsa(50, 50, az=200.0)
        both = rasterize_radiation([a, b], 700, tile)
        np.testing.assert_allclose(both, rasterize_radiation([a], 700, tile)
                                   + rasterize_radiation([b], 700, tile), rtol=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_pixel_oracle(self, seed):
        tile, _, recs = oracles.random_scene(np.random.default_rng(100 + seed), grid=32)
        for band in (700, 1800, 3500):
            got = rasterize_radiation(recs, band, tile)[0].astype(np.float64)
            want = oracles.radiation_raster(recs, band, tile)
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-30)
        np.testing.assert_array_equal(rasterize_bsa_heights(recs, tile)[0],
                                      oracles.bsa_raster(recs, tile))


class TestRasters:
    def test_missing_raster_fill(self, tile):
        assert np.all(resample_raster(None, tile, fill=255) == 255)
        assert resample_raster(None, tile, fill=0).shape == (3, 128, 128)

    def test_nearest_neighbour(self, tile):
        lat, lon = unproject(-200, 200, ORIGIN)
        px = np.zeros((2, 2, 3), np.uint8)
        px[0, 0] = (10, 20, 30)
        px[1, 1] = (40, 50, 60)
        out = resample_raster(GeoRaster(px, lat, lon, 200.0), tile, fill=7)
        np.testing.assert_array_equal(out[:, 0, 0], [10, 20, 30])
        np.testing.assert_array_equal(out[:, 127, 127], [40, 50, 60])

    def test_partial_coverage_filled(self, tile):
        lat, lon = unproject(0, 200, ORIGIN)
        out = resample_raster(GeoRaster(np.full((64, 64, 3), 9, np.uint8), lat, lon, 3.125),
                              tile, fill=255)
        assert np.all(out[:, :, :64] == 255) and np.all(out[:, :64, 64:] == 9)

    def test_compose_order(self):
        parts = [np.full((3, 4, 4), 1), np.full((3, 4, 4), 2), np.full((1, 4, 4), 3),
                 np.full((1, 4, 4), 4)]
        x = compose_input_tensor(*parts, [np.full((1, 4, 4), 10 + i) for i in range(7)])
        assert x.shape == (15, 4, 4) and x.dtype == np.float32
        np.testing.assert_array_equal(x[:, 0, 0], [1, 1, 1, 2, 2, 2, 3, 4, *range(10, 17)])
        assert len(CHANNELS) == 15

    def test_sources_render(self, tile):
        src = GeoSources.from_records(ORIGIN, [], [TestBsaAndRadiation().bsa(0, 0)])
        x = src.render(src.tile(48.85, 2.35))
        assert x.shape == (15, 128, 128)
        assert np.all(x[3:6] == 255) and np.all(x[:3] == 0)
        assert x[7].max() == 30.0


class TestFileIO:
    def test_building_round_trip(self, tmp_path):
        fps = [BuildingFootprint("a", [(48.85, 2.35), (48.851, 2.35), (48.851, 2.351)], 12.5),
               BuildingFootprint("b", [(48.86, 2.36), (48.861, 2.36), (48.861, 2.361)], None, 3)]
        write_buildings_csv(tmp_path / "b.csv", fps)
        assert read_buildings_csv(tmp_path / "b.csv") == fps

    def test_bsa_round_trip(self, tmp_path):
        recs = [BsaRecord("s1", 48.85, 2.35, 30.0, 120.0, 1800, 65.0, 300.0),
                BsaRecord("s2", 48.851, 2.351, 25.0, 0.0, 700)]
        write_bsa_csv(tmp_path / "s.csv", recs)
        assert read_bsa_csv(tmp_path / "s.csv") == recs

    def test_bad_rows(self, tmp_path):
        (tmp_path / "s.csv").write_text("site_id,lat,lon,height_m,azimuth_deg,band_mhz\n"
                                        "x,48.8,2.3,30,0,1234\n")
        with pytest.raises(GeoDataError):
            read_bsa_csv(tmp_path / "s.csv")
        (tmp_path / "b.csv").write_text("id,polygon,height_m,floors\na,2.3 48.8;2.3,,\n")
        with pytest.raises(GeoDataError):
            read_buildings_csv(tmp_path / "b.csv")

    def test_raster_round_trip(self, tmp_path):
        px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        write_raster(tmp_path / "ir.ppm", GeoRaster(px, 48.86, 2.34, 2.5))
        back = read_raster(tmp_path / "ir.ppm")
        np.testing.assert_array_equal(back.pixels, px)
        assert (back.origin_lat, back.origin_lon, back.meters_per_pixel) == (48.86, 2.34, 2.5)

    def test_raster_errors(self, tmp_path):
        (tmp_path / "a.ppm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(GeoDataError, match="PPM"):
            read_raster(tmp_path / "a.ppm")
        (tmp_path / "b.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(GeoDataError, match="world file"):
            read_raster(tmp_path / "b.ppm")
        (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n" + bytes(5))
        (tmp_path / "c.wld").write_text("48\n2\n1\n")
        with pytest.raises(GeoDataError, match="truncated"):
            read_raster(tmp_path / "c.ppm")

    def test_bands(self):
        assert BANDS_MHZ == (700, 800, 900, 1800, 2100, 2600, 3500)
