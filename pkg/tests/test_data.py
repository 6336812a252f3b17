import numpy as np
import numpy.testing as npt
import pytest

from mft import data as D
from mft.tensor import ContractError, Rng


def tiny_dataset(tmp_path, seed=1, **overrides):
    spec_kw = dict(num_aus=6, subjects=4, samples_per_subject=5, alpha_dim=6, beta_dim=4)
    spec_kw.update(overrides)
    spec = D.SynthSpec(**spec_kw)
    return spec, D.synth_generate(spec, seed, tmp_path / "data")


class TestManifest:
    def test_round_trip_bit_exact(self, tmp_path):
        root = tmp_path
        a = np.array([1.5, -2.25, 3.125])
        b = np.array([0.1, 0.2])
        (root / "one.alpha.bin").write_bytes(np.ascontiguousarray(a, "<f8").tobytes())
        (root / "one.beta.bin").write_bytes(np.ascontiguousarray(b, "<f8").tobytes())
        (root / "two.alpha.bin").write_bytes(np.ascontiguousarray(a * 2, "<f8").tobytes())
        (root / "two.beta.bin").write_bytes(np.ascontiguousarray(b * 2, "<f8").tobytes())
        D.write_manifest(
            root / "manifest.txt",
            3,
            [("alpha", (3,)), ("beta", (2,))],
            [
                ("one", "s0", ("one.alpha.bin", "one.beta.bin"), "010"),
                ("two", "s1", ("two.alpha.bin", "two.beta.bin"), "101"),
            ],
        )
        mani = D.load_manifest(root / "manifest.txt")
        sample = D.load_sample(mani, "one")
        assert sample.modalities["alpha"].tobytes() == a.tobytes()
        assert sample.modalities["beta"].tobytes() == b.tobytes()

    def test_label_parsing(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(np.zeros(2, "<f8").tobytes())
        D.write_manifest(tmp_path / "m.txt", 12, [("alpha", (2,))], [("x", "s0", ("x.bin",), "010000000000")])
        mani = D.load_manifest(tmp_path / "m.txt")
        labels = D.load_sample(mani, "x").labels
        expect = np.zeros(12)
        expect[1] = 1
        npt.assert_array_equal(labels, expect)

    def test_missing_file_names_row(self, tmp_path):
        D.write_manifest(tmp_path / "m.txt", 2, [("alpha", (2,))], [("ghost", "s0", ("nope.bin",), "01")])
        with pytest.raises(D.LoadError, match="ghost"):
            D.load_manifest(tmp_path / "m.txt")

    def test_element_count_mismatch_names_row(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(np.zeros(3, "<f8").tobytes())
        D.write_manifest(tmp_path / "m.txt", 2, [("alpha", (2,))], [("x", "s0", ("x.bin",), "01")])
        with pytest.raises(D.LoadError, match="x"):
            D.load_manifest(tmp_path / "m.txt")

    def test_malformed_label_rejected(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(np.zeros(2, "<f8").tobytes())
        D.write_manifest(tmp_path / "m.txt", 3, [("alpha", (2,))], [("x", "s0", ("x.bin",), "012")])
        with pytest.raises(D.LoadError, match="label"):
            D.load_manifest(tmp_path / "m.txt")

    def test_duplicate_ids_rejected(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(np.zeros(2, "<f8").tobytes())
        rows = [("x", "s0", ("x.bin",), "01"), ("x", "s1", ("x.bin",), "10")]
        D.write_manifest(tmp_path / "m.txt", 2, [("alpha", (2,))], rows)
        with pytest.raises(D.LoadError, match="duplicate"):
            D.load_manifest(tmp_path / "m.txt")

    def test_wrong_header_rejected(self, tmp_path):
        (tmp_path / "m.txt").write_text("something else\nC=2\n")
        with pytest.raises(D.LoadError, match="header"):
            D.load_manifest(tmp_path / "m.txt")


class TestZscore:
    def _samples(self, arrays):
        return [
            D.Sample(id=f"i{i}", subject="s", modalities={"alpha": np.asarray(a, float)}, labels=np.array([1.0]))
            for i, a in enumerate(arrays)
        ]

    def test_two_value_hand_case(self):
        samples = self._samples([[1.0], [3.0]])
        stats = D.zscore(samples)
        mean, std = stats.stats["alpha"]
        assert (mean, std) == (2.0, 1.0)
        out = [D.apply_standardization(stats, s).modalities["alpha"][0] for s in samples]
        npt.assert_array_equal(out, [-1.0, 1.0])

    def test_shifted_data_centers_to_zero(self):
        rng = Rng(2)
        base = rng.normal((5, 4)) + 17.0
        samples = self._samples(list(base))
        stats = D.zscore(samples)
        centered = np.concatenate([D.apply_standardization(stats, s).modalities["alpha"] for s in samples])
        assert abs(centered.mean()) < 1e-9
        assert abs(centered.std() - 1.0) < 1e-9

    def test_not_idempotent(self):
        samples = self._samples([[1.0, 5.0], [3.0, -2.0]])
        stats = D.zscore(samples)
        once = D.apply_standardization(stats, samples[0])
        twice = D.apply_standardization(stats, once)
        assert not np.allclose(once.modalities["alpha"], twice.modalities["alpha"])

    def test_per_element_statistics(self):
        samples = self._samples([[1.0, 10.0], [3.0, 30.0]])
        stats = D.zscore(samples, per_element=True)
        mean, std = stats.stats["alpha"]
        npt.assert_array_equal(mean, [2.0, 20.0])
        npt.assert_array_equal(std, [1.0, 10.0])
        out = D.apply_standardization(stats, samples[0]).modalities["alpha"]
        npt.assert_array_equal(out, [-1.0, -1.0])

    def test_per_element_rejects_constant_element(self):
        samples = self._samples([[1.0, 5.0], [3.0, 5.0]])
        with pytest.raises(ContractError, match="constant"):
            D.zscore(samples, per_element=True)

    def test_constant_modality_rejected(self):
        samples = self._samples([[2.0], [2.0]])
        with pytest.raises(ContractError, match="constant"):
            D.zscore(samples)

    def test_needs_two_samples(self):
        with pytest.raises(ContractError):
            D.zscore(self._samples([[1.0]]))


class TestFolds:
    def test_divisible_case(self):
        split = D.subject_folds([f"s{i}" for i in range(6)], 3, 0)
        sizes = [len(split.subjects_in(f)) for f in range(3)]
        assert sizes == [2, 2, 2]

    def test_deterministic(self):
        subjects = [f"s{i}" for i in range(9)]
        a = D.subject_folds(subjects, 3, 5)
        b = D.subject_folds(subjects, 3, 5)
        assert a.assignments == b.assignments

    def test_round_robin_on_41_subjects(self):
        split = D.subject_folds([f"p{i:02d}" for i in range(41)], 3, 9)
        sizes = sorted((len(split.subjects_in(f)) for f in range(3)), reverse=True)
        assert sizes == [14, 14, 13]

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_exclusivity_all_folds(self, k):
        subjects = [f"s{i}" for i in range(11)]
        split = D.subject_folds(subjects, k, 3)
        assert {s for f in range(k) for s in split.subjects_in(f)} == set(subjects)
        for fold in range(k):
            test = split.subjects_in(fold)
            train = {s for f in range(k) if f != fold for s in split.subjects_in(f)}
            assert not (test & train)

    def test_too_few_folds(self):
        with pytest.raises(ContractError):
            D.subject_folds(["a", "b"], 1, 0)

    def test_split_separates_samples_by_subject(self, tmp_path):
        _, mani = tiny_dataset(tmp_path)
        samples = D.load_all(mani)
        split = D.subject_folds(mani.subjects(), 2, 0)
        train, test = split.split(samples, 0)
        assert not ({s.subject for s in train} & {s.subject for s in test})
        assert len(train) + len(test) == len(samples)


class TestSynthGenerator:
    def test_manifest_row_count(self, tmp_path):
        spec, mani = tiny_dataset(tmp_path)
        assert len(mani.rows) == spec.subjects * spec.samples_per_subject

    def test_same_seed_bit_identical_tree(self, tmp_path):
        spec = D.SynthSpec(num_aus=3, subjects=2, samples_per_subject=3, alpha_dim=4, beta_dim=4)
        m1 = D.synth_generate(spec, 11, tmp_path / "a")
        m2 = D.synth_generate(spec, 11, tmp_path / "b")
        files1 = sorted(p.name for p in (tmp_path / "a").iterdir())
        files2 = sorted(p.name for p in (tmp_path / "b").iterdir())
        assert files1 == files2
        for name in files1:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_different_seed_differs(self, tmp_path):
        spec = D.SynthSpec(num_aus=3, subjects=2, samples_per_subject=3, alpha_dim=4, beta_dim=4)
        D.synth_generate(spec, 11, tmp_path / "a")
        D.synth_generate(spec, 12, tmp_path / "c")
        name = "s000_0000.alpha.bin"
        assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "c" / name).read_bytes()

    def test_au_roles_cycle(self):
        roles = D.au_roles(6)
        assert roles == [D.ROLE_ALPHA, D.ROLE_BETA, D.ROLE_SYNERGY] * 2
        assert D.synergy_indices(6) == [2, 5]

    def test_labels_follow_planted_rule(self, tmp_path):
        # alpha-driven AUs must be decodable from the alpha codebook exactly at sigma=0
        spec = D.SynthSpec(num_aus=3, subjects=2, samples_per_subject=10, alpha_dim=8, beta_dim=8,
                           noise_sigma=0.0, subject_sigma=0.0)
        mani = D.synth_generate(spec, 13, tmp_path / "clean")
        code_a = D._sign_codebook(Rng(13).child("codebook/alpha"), (8, 3))
        for sample in D.load_all(mani):
            bits, *_ = np.linalg.lstsq(code_a, sample.modalities["alpha"], rcond=None)
            a_bits = np.round(bits)
            assert sample.labels[0] == a_bits[0]

    def test_synergy_uncorrelated_with_single_modality_features(self, tmp_path):
        spec = D.SynthSpec(num_aus=3, subjects=10, samples_per_subject=200, alpha_dim=8, beta_dim=8)
        mani = D.synth_generate(spec, 42, tmp_path / "big")
        samples = D.load_all(mani)
        y = np.array([s.labels[2] for s in samples])  # the synergy AU
        for name in ("alpha", "beta"):
            feats = np.stack([s.modalities[name] for s in samples])
            for j in range(feats.shape[1]):
                corr = np.corrcoef(y, feats[:, j])[0, 1]
                assert abs(corr) < 0.1, (name, j, corr)

    def test_alpha_driven_au_linearly_probeable(self, tmp_path):
        from sklearn.linear_model import LogisticRegression

        spec = D.SynthSpec(num_aus=3, subjects=8, samples_per_subject=100, alpha_dim=8, beta_dim=8)
        mani = D.synth_generate(spec, 21, tmp_path / "probe")
        samples = D.load_all(mani)
        x = np.stack([s.modalities["alpha"] for s in samples])
        y = np.array([s.labels[0] for s in samples])
        probe = LogisticRegression(max_iter=1000).fit(x[:600], y[:600])
        assert probe.score(x[600:], y[600:]) > 0.95


@pytest.fixture(scope="module")
def big(tmp_path_factory):
    root = tmp_path_factory.mktemp("synergy")
    spec = D.SynthSpec(num_aus=3, subjects=10, samples_per_subject=200, alpha_dim=8, beta_dim=8)
    manis = [D.synth_generate(spec, seed, root / f"seed{seed}") for seed in (1, 2, 3)]
    return [D.load_all(m) for m in manis]


class TestSynergyLearnability:
    """The planted XOR family: invisible to each modality alone, plainly
    visible to a joint probe over feature products."""

    def test_single_modality_probe_near_chance(self, big):
        from sklearn.linear_model import LogisticRegression
        from sklearn.neural_network import MLPClassifier

        for samples in big:
            y = np.array([s.labels[2] for s in samples])
            for name in ("alpha", "beta"):
                x = np.stack([s.modalities[name] for s in samples])
                linear = LogisticRegression(max_iter=500).fit(x[:1400], y[:1400])
                assert linear.score(x[1400:], y[1400:]) <= 0.55
            mlp = MLPClassifier(hidden_layer_sizes=(32,), max_iter=300, random_state=0)
            x = np.stack([s.modalities["alpha"] for s in samples])
            mlp.fit(x[:1400], y[:1400])
            assert mlp.score(x[1400:], y[1400:]) <= 0.55

    def test_joint_product_probe_succeeds(self, big):
        from sklearn.linear_model import LogisticRegression

        samples = big[0]
        y = np.array([s.labels[2] for s in samples])
        xa = np.stack([s.modalities["alpha"] for s in samples])
        xb = np.stack([s.modalities["beta"] for s in samples])
        products = (xa[:, :, None] * xb[:, None, :]).reshape(len(y), -1)
        x = np.concatenate([xa, xb, products], axis=1)
        probe = LogisticRegression(max_iter=2000).fit(x[:1400], y[:1400])
        assert probe.score(x[1400:], y[1400:]) >= 0.9
