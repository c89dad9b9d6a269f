import numpy as np
import pytest

from cicsteer import datapipe as dp
from cicsteer import simtown as st


def make_rows(counts, seed=0):
    """Synthetic index rows with the given per-command counts."""
    rng = np.random.default_rng(seed)
    rows = []
    for cmd, n in counts.items():
        for k in range(n):
            rows.append({"episode": "ep0", "frame": len(rows), "cam": "front",
                         "steering": float(rng.uniform(-0.8, 0.8)),
                         "command": cmd, "condition": "noonClear", "t": 0.0})
    return rows


class TestPGM:
    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((48, 64))
        dp.save_pgm(tmp_path / "x.pgm", img)
        back = dp.load_pgm(tmp_path / "x.pgm")
        assert back.shape == (48, 64)
        # 8-bit quantization: worst case half a level
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_values_clipped(self, tmp_path):
        dp.save_pgm(tmp_path / "x.pgm", np.array([[-0.5, 1.5]]))
        back = dp.load_pgm(tmp_path / "x.pgm")
        assert back[0, 0] == 0.0 and back[0, 1] == 1.0

    def test_header(self, tmp_path):
        dp.save_pgm(tmp_path / "x.pgm", np.zeros((2, 3)))
        raw = (tmp_path / "x.pgm").read_bytes()
        assert raw.startswith(b"P5\n3 2\n255\n")
        assert len(raw) == len(b"P5\n3 2\n255\n") + 6

    def test_non_pgm_rejected(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(dp.DatasetError):
            dp.load_pgm(tmp_path / "x.pgm")


class TestPersist:
    @pytest.fixture()
    def episode(self):
        town = st.build_town("A", 0)
        route = st.node_route(town, [0, town.adjacency[0][0]])
        return st.run_episode(town, route, st.CONDITIONS["noonClear"], seed=0,
                              duration=1.0, cameras=("left", "front", "right"))

    def test_rows_and_files(self, tmp_path, episode):
        rows = dp.persist_episode(episode, tmp_path, "ep0")
        assert len(rows) == 3 * len(episode.frames)
        index = dp.load_index(tmp_path)
        assert index == rows
        for row in rows:
            assert dp.image_path(tmp_path, row).exists()
            assert row["command"] in ("left", "right", "straight", "follow")
            assert -1.0 <= row["steering"] <= 1.0

    def test_images_survive_persistence(self, tmp_path, episode):
        rows = dp.persist_episode(episode, tmp_path, "ep0")
        row = rows[1]
        orig = episode.frames[row["frame"]].images[row["cam"]]
        back = dp.load_sample_image(tmp_path, row)
        assert np.abs(back - orig).max() <= 0.5 / 255.0 + 1e-12

    def test_duplicate_episode_id(self, tmp_path, episode):
        dp.persist_episode(episode, tmp_path, "ep0")
        with pytest.raises(dp.DatasetError):
            dp.persist_episode(episode, tmp_path, "ep0")

    def test_append_multiple_episodes(self, tmp_path, episode):
        a = dp.persist_episode(episode, tmp_path, "ep0")
        b = dp.persist_episode(episode, tmp_path, "ep1")
        assert dp.load_index(tmp_path) == a + b

    def test_missing_index(self, tmp_path):
        with pytest.raises(dp.DatasetError):
            dp.load_index(tmp_path)


class TestFilterAndSplit:
    def test_filter_boundary_inclusive(self):
        rows = [{"steering": s, "command": "follow"}
                for s in (-0.81, -0.8, 0.0, 0.8, 0.80001, 1.0)]
        kept = dp.filter_steering(rows)
        assert [r["steering"] for r in kept] == [-0.8, 0.0, 0.8]

    def test_split_partition_and_ratio(self):
        rows = make_rows({"follow": 1000, "left": 200, "right": 60,
                          "straight": 100})
        train, val = dp.split(rows, seed=3)
        assert len(train) + len(val) == len(rows)
        key = lambda r: (r["frame"], r["command"])
        assert set(map(key, train)).isdisjoint(map(key, val))
        assert abs(len(train) / len(rows) - 0.7) < 0.02
        # stratified: the ratio holds per command too
        for cmd, n in dp.command_counts(train).items():
            total = sum(1 for r in rows if r["command"] == cmd)
            assert abs(n / total - 0.7) < 0.02

    def test_split_deterministic(self):
        rows = make_rows({"follow": 50, "left": 20})
        a = dp.split(rows, seed=7)
        b = dp.split(rows, seed=7)
        assert a == b
        c = dp.split(rows, seed=8)
        assert a != c

    def test_split_empty_or_tiny(self):
        with pytest.raises(dp.DatasetError):
            dp.split([])
        with pytest.raises(dp.DatasetError):
            dp.split(make_rows({"follow": 1}))


class TestAugment:
    def test_deterministic(self):
        img = np.random.default_rng(0).random((48, 64))
        a = dp.augment(img, np.random.default_rng(5))
        b = dp.augment(img, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_output_contract(self):
        img = np.random.default_rng(1).random((48, 64))
        for s in range(20):
            out = dp.augment(img, np.random.default_rng(s))
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_identity_possible(self):
        # with three coin flips, some seed applies no op at all
        img = np.random.default_rng(2).random((48, 64))
        hits = [np.array_equal(dp.augment(img, np.random.default_rng(s)), img)
                for s in range(40)]
        assert any(hits) and not all(hits)

    def test_input_not_mutated(self):
        img = np.random.default_rng(3).random((48, 64))
        ref = img.copy()
        dp.augment(img, np.random.default_rng(0))
        assert np.array_equal(img, ref)

    def test_resize_bilinear_identity(self):
        img = np.random.default_rng(4).random((12, 16))
        assert np.allclose(dp._resize_bilinear(img, (12, 16)), img)


class TestBalancedBatches:
    COMMANDS = ("left", "right", "straight", "follow")

    def test_exact_histogram(self):
        rows = make_rows({"follow": 500, "left": 80, "right": 40,
                          "straight": 70})
        for batch in dp.balanced_batches(rows, self.COMMANDS, 120, seed=0):
            assert len(batch) == 120
            counts = dp.command_counts(batch)
            assert all(counts[c] == 30 for c in self.COMMANDS)

    def test_batch_count(self):
        rows = make_rows({"follow": 500, "left": 80, "right": 40,
                          "straight": 70})
        batches = list(dp.balanced_batches(rows, self.COMMANDS, 120, seed=0))
        assert len(batches) == len(rows) // 120

    def test_oversampling_frequency(self):
        # every scarce "right" row is used, and rows inside one steering
        # bin are drawn uniformly (each bin gets an equal share of slots)
        rows = make_rows({"follow": 500, "left": 80, "right": 40,
                          "straight": 70})
        seen = {}
        for batch in dp.balanced_batches(rows, self.COMMANDS, 120, seed=0):
            for r in batch:
                if r["command"] == "right":
                    seen[r["frame"]] = seen.get(r["frame"], 0) + 1
        right = [r for r in rows if r["command"] == "right"]
        assert set(seen) == {r["frame"] for r in right}
        bins = {}
        for r in right:
            bins.setdefault(dp._steer_bin(r), []).append(r["frame"])
        n_batches = len(rows) // 120
        slots = {k: sum(1 for s in range(30) if s % len(bins) == k)
                 for k in bins}
        for k, frames in bins.items():
            expected = n_batches * slots[k] / len(frames)
            assert all(abs(seen[f] - expected) <= 1 for f in frames)

    def test_hard_steering_oversampled(self):
        # near-zero "follow" frames dominate the raw rows but not the batches
        rows = make_rows({"follow": 500, "left": 40, "right": 40,
                          "straight": 40})
        for r in rows:
            if r["command"] == "follow":
                r["steering"] = 0.01
        for r in rows[:10]:          # ten hard recovery frames
            r["steering"] = 0.7
        hard = straight_count = 0
        for batch in dp.balanced_batches(rows, self.COMMANDS, 120, seed=0):
            for r in batch:
                if r["command"] == "follow":
                    straight_count += 1
                    hard += abs(r["steering"]) > 0.5
        assert hard >= straight_count // 3  # ~half the slots, never < a third

    def test_epoch_changes_order(self):
        rows = make_rows({"follow": 200, "left": 50, "right": 50,
                          "straight": 50})
        a = list(dp.balanced_batches(rows, self.COMMANDS, 40, seed=0, epoch=0))
        b = list(dp.balanced_batches(rows, self.COMMANDS, 40, seed=0, epoch=1))
        c = list(dp.balanced_batches(rows, self.COMMANDS, 40, seed=0, epoch=0))
        assert a == c
        assert a != b

    def test_indivisible_batch_size(self):
        rows = make_rows({c: 10 for c in self.COMMANDS})
        with pytest.raises(dp.DatasetError):
            next(dp.balanced_batches(rows, self.COMMANDS, 30))

    def test_missing_command(self):
        rows = make_rows({"follow": 10, "left": 10, "straight": 10})
        with pytest.raises(dp.DatasetError):
            next(dp.balanced_batches(rows, self.COMMANDS, 40))


class TestSampleCache:
    def test_cache_matches_disk(self, tmp_path):
        town = st.build_town("A", 0)
        route = st.node_route(town, [0, town.adjacency[0][0]])
        log = st.run_episode(town, route, st.CONDITIONS["noonClear"], seed=0,
                             duration=0.5, cameras=("front",))
        rows = dp.persist_episode(log, tmp_path, "ep0")
        cache = dp.SampleCache(tmp_path)
        for row in rows:
            a = cache.get(row)
            b = dp.load_sample_image(tmp_path, row)
            assert np.array_equal(a, b)
        # second read comes from memory and is identical
        assert np.array_equal(cache.get(rows[0]), dp.load_sample_image(tmp_path, rows[0]))
