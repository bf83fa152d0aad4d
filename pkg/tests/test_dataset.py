import numpy as np
import pytest

from cropprogress.dataset import (
    ModelingTable,
    ProgressPanel,
    StageScheme,
    join_panel,
    load_progress,
    load_reflectance,
    load_weather,
    write_progress,
)
from cropprogress.exceptions import DataError
from cropprogress.features import FeatureFrame


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestStageScheme:
    def test_basic(self):
        scheme = StageScheme("corn", ("Planted", "Emerged"))
        assert scheme.n_categories == 3
        assert scheme.stage_index("Planted") == 2
        assert scheme.stage_index("Emerged") == 3

    def test_duplicate_labels_rejected(self):
        with pytest.raises(DataError, match="unique"):
            StageScheme("x", ("A", "A"))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            StageScheme("x", ())


class TestLoadProgress:
    def test_percent_conversion_and_implicit_category(self, tmp_path):
        path = write(tmp_path, "p.csv", "season,day,Planted\n2021,130,95\n")
        panel = load_progress(path, StageScheme("c", ("Planted",)))
        assert np.allclose(panel.y, [[1.0, 0.95]])

    def test_small_dip_clamped(self, tmp_path):
        path = write(
            tmp_path, "p.csv", "season,day,Planted\n2021,130,40\n2021,137,39.8\n"
        )
        panel = load_progress(path, StageScheme("c", ("Planted",)))
        assert panel.y[1, 1] == pytest.approx(0.40)

    def test_large_dip_rejected_citing_row(self, tmp_path):
        path = write(
            tmp_path, "p.csv", "season,day,Planted\n2021,130,40\n2021,137,20\n"
        )
        with pytest.raises(DataError, match="row 2"):
            load_progress(path, StageScheme("c", ("Planted",)))

    def test_missing_column(self, tmp_path):
        path = write(tmp_path, "p.csv", "season,day,Planted\n2021,130,95\n")
        with pytest.raises(DataError, match="Emerged"):
            load_progress(path, StageScheme("c", ("Planted", "Emerged")))

    def test_out_of_range_value(self, tmp_path):
        path = write(tmp_path, "p.csv", "season,day,Planted\n2021,130,105\n")
        with pytest.raises(DataError, match="row 1.*Planted"):
            load_progress(path, StageScheme("c", ("Planted",)))

    def test_duplicate_keys_rejected(self, tmp_path):
        path = write(
            tmp_path, "p.csv", "season,day,Planted\n2021,130,10\n2021,130,11\n"
        )
        with pytest.raises(DataError, match="duplicate"):
            load_progress(path, StageScheme("c", ("Planted",)))

    def test_round_trip_bit_exact(self, tmp_path):
        text = (
            "season,day,Planted,Emerged\n"
            "2021,130,95.123456,40\n"
            "2021,137,96,41.5\n"
            "2020,120,7,0.25\n"
        )
        path = write(tmp_path, "p.csv", text)
        scheme = StageScheme("c", ("Planted", "Emerged"))
        panel = load_progress(path, scheme)
        out = tmp_path / "out.csv"
        write_progress(panel, out)
        reloaded = load_progress(out, scheme)
        assert np.array_equal(panel.y, reloaded.y)
        assert np.array_equal(panel.seasons, reloaded.seasons)
        assert np.array_equal(panel.days, reloaded.days)


class TestPanelInvariants:
    def test_bounds_enforced(self):
        scheme = StageScheme("c", ("A",))
        with pytest.raises(DataError):
            ProgressPanel(scheme, [1], [10], [[1.0, 1.2]])

    def test_first_category_must_be_one(self):
        scheme = StageScheme("c", ("A",))
        with pytest.raises(DataError):
            ProgressPanel(scheme, [1], [10], [[0.9, 0.5]])

    def test_time_monotonicity_enforced_by_default(self):
        scheme = StageScheme("c", ("A",))
        with pytest.raises(DataError, match="decreases over time"):
            ProgressPanel(scheme, [1, 1], [10, 17], [[1.0, 0.5], [1.0, 0.3]])

    def test_simulated_panels_may_opt_out(self):
        scheme = StageScheme("c", ("A",))
        panel = ProgressPanel(
            scheme, [1, 1], [10, 17], [[1.0, 0.5], [1.0, 0.3]], monotone_time=False
        )
        assert len(panel) == 2

    def test_rows_sorted_after_construction(self):
        scheme = StageScheme("c", ("A",))
        panel = ProgressPanel(
            scheme, [2, 1], [10, 12], [[1.0, 0.5], [1.0, 0.3]], monotone_time=False
        )
        assert panel.seasons.tolist() == [1, 2]

    def test_arrays_read_only(self):
        scheme = StageScheme("c", ("A",))
        panel = ProgressPanel(scheme, [1], [10], [[1.0, 0.5]])
        with pytest.raises(ValueError):
            panel.y[0, 1] = 0.9


class TestWeatherAndReflectance:
    def test_weather_row(self, tmp_path):
        path = write(tmp_path, "w.csv", "season,day,tmin,tmax\n2021,120,5.0,21.0\n")
        weather = load_weather(path)
        assert weather.tmin[0] == 5.0 and weather.tmax[0] == 21.0

    def test_inverted_temperatures_rejected(self, tmp_path):
        path = write(tmp_path, "w.csv", "season,day,tmin,tmax\n2021,120,21.0,5.0\n")
        with pytest.raises(DataError, match="row 1"):
            load_weather(path)

    def test_reflectance_blanks_become_missing(self, tmp_path):
        path = write(tmp_path, "r.csv", "season,day,red,nir\n2021,120,,\n")
        series = load_reflectance(path)
        assert np.isnan(series.red[0]) and np.isnan(series.nir[0])

    def test_reflectance_domain(self, tmp_path):
        path = write(tmp_path, "r.csv", "season,day,red,nir\n2021,120,1.2,0.5\n")
        with pytest.raises(DataError):
            load_reflectance(path)


class TestJoin:
    def _frame(self):
        return FeatureFrame(
            [2021, 2021], [130, 137],
            {"calendar": [130.0, 137.0], "thermal": [10.0, 12.0]},
        )

    def test_full_coverage(self):
        scheme = StageScheme("c", ("A",))
        panel = ProgressPanel(scheme, [2021, 2021], [130, 137], [[1, 0.2], [1, 0.4]])
        table = join_panel(panel, self._frame())
        assert len(table) == 2
        assert np.allclose(table.covariate("thermal"), [10.0, 12.0])

    def test_missing_key_listed(self):
        scheme = StageScheme("c", ("A",))
        panel = ProgressPanel(scheme, [2021], [200], [[1, 0.2]])
        with pytest.raises(DataError, match=r"season 2021, day 200"):
            join_panel(panel, self._frame())

    def test_empty_panel_gives_empty_table(self):
        scheme = StageScheme("c", ("A",))
        panel = ProgressPanel(scheme, [], [], np.empty((0, 2)))
        table = join_panel(panel, self._frame())
        assert len(table) == 0

    def test_subset_seasons(self):
        scheme = StageScheme("c", ("A",))
        table = ModelingTable(
            scheme, [1, 1, 2], [10, 17, 10],
            [[1, 0.1], [1, 0.2], [1, 0.3]],
            {"calendar": [10.0, 17.0, 10.0]},
        )
        sub = table.subset_seasons([2])
        assert len(sub) == 1
        with pytest.raises(DataError, match="not present"):
            table.subset_seasons([9])
