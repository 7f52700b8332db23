import json
import math

import jsonschema
import pytest

from dst_selftrain.config import ConfigError, ExperimentConfig, load_config, parse_config_text
from dst_selftrain.dialogue_data import BeliefState, Example, Utterance, build_examples, serialize_belief
from dst_selftrain.models import EmptyTrainingSet, ToyGenerativeModel, evaluate_jga, make_factory, train
from dst_selftrain.ppaug import AugmentedExample
from dst_selftrain.selftrain import (
    REPORT_SCHEMA,
    SUMMARY_SCHEMA,
    Resources,
    STState,
    init_teacher,
    last_complete_iteration,
    load_split,
    make_resources,
    pseudo_label,
    run,
    run_iteration,
    train_student,
)
from dst_selftrain.synthetic import generate_corpus


def cfg_for(**overrides) -> ExperimentConfig:
    base = dict(synthetic_dialogues=40, seed=3, max_iterations=2, st_patience=10)
    base.update(overrides)
    return ExperimentConfig(**base)


def gold(i, value="east"):
    return Example(f"g{i}#0", f"g{i}", 0, (Utterance("user", f"hotel number {i} in the {value}"),),
                   target=BeliefState.of(("hotel", "area", value)))


class CountingToy(ToyGenerativeModel):
    trained_on: list = []

    def fit_epoch(self, examples, epoch, schedule):
        CountingToy.trained_on.append(len(examples))
        super().fit_epoch(examples, epoch, schedule)


class TestInitTeacher:
    def test_memorizes_L0(self):
        L0 = [gold(i) for i in range(10)]
        teacher, _ = init_teacher(L0, make_factory("toy"), cfg_for().teacher_schedule)
        assert evaluate_jga(teacher, L0) == 1.0

    def test_empty(self):
        with pytest.raises(EmptyTrainingSet):
            init_teacher([], make_factory("toy"), cfg_for().teacher_schedule)

    def test_gold_only(self):
        with pytest.raises(ValueError):
            init_teacher([gold(0).with_label(BeliefState(), "pseudo", 0.5)], make_factory("toy"), cfg_for().teacher_schedule)

    def test_validation_jga_matches_independent_count(self):
        split = load_split(cfg_for())
        teacher, history = init_teacher(split.labeled, make_factory("toy"), cfg_for().teacher_schedule, split.validation)
        right = sum(
            teacher.generate(e.input_text).raw_text == serialize_belief(e.target) for e in split.validation
        )
        assert history.best_jga == right / len(split.validation)


class TestPseudoLabel:
    def test_memorized_context_gets_gold(self):
        teacher = ToyGenerativeModel()
        e = gold(1)
        teacher.memorize(e.input_text, e.target, profile=[0.9, 0.9, 0.6])
        (s,) = pseudo_label(teacher, [e.unlabeled()], "average")
        assert s.example.target == e.target and s.example.label_kind == "pseudo"
        assert s.score == pytest.approx(0.8) and not s.flagged

    def test_empty_pool(self):
        assert pseudo_label(ToyGenerativeModel(), [], "max") == []

    def test_unparseable_generation_is_flagged(self):
        teacher = ToyGenerativeModel()
        teacher.memorize(gold(1).input_text, "[hotel] dangling")
        (s,) = pseudo_label(teacher, [gold(1).unlabeled()], "average")
        assert s.flagged and s.score == 0.0 and s.example.target == BeliefState()

    @pytest.mark.parametrize("criterion", ["average", "max", "random"])
    def test_one_score_per_example(self, criterion):
        split = load_split(cfg_for())
        teacher, _ = init_teacher(split.labeled, make_factory("toy", noise_rate=0.3), cfg_for().teacher_schedule)
        out = pseudo_label(teacher, split.unlabeled, criterion, iteration=1)
        assert len(out) == len(split.unlabeled)
        assert all(0.0 <= s.score <= 1.0 and s.example.label_kind == "pseudo" for s in out)
        assert [s.example_id for s in out] == [e.example_id for e in split.unlabeled]


class TestTrainStudent:
    def setup_method(self):
        self.split = load_split(cfg_for())
        self.L = self.split.labeled

    def test_no_augmentation_is_plain_finetuning(self):
        cfg = cfg_for()
        factory = make_factory("toy")
        student, _ = train_student(factory, [], self.L, cfg, self.split.validation, seed=9)
        plain, _ = train(factory(9), self.L, self.split.validation, cfg.finetune_schedule)
        assert student.state_dict() == plain.state_dict()

    def test_merged_trains_on_union(self):
        CountingToy.trained_on = []
        A = [AugmentedExample(e.example_id, e.user_utterance.text + " thanks", e.target, "mlm_maintain", e.context[:-1]) for e in self.L]
        train_student(lambda seed: CountingToy(seed), A, self.L, cfg_for(training_mode="merged"), [], seed=0)
        assert set(CountingToy.trained_on) == {2 * len(self.L)}

    def test_separate_pretrains_then_finetunes(self):
        CountingToy.trained_on = []
        A = [AugmentedExample(e.example_id, e.user_utterance.text, e.target, "mlm_maintain", e.context[:-1]) for e in self.L[:3]]
        cfg = cfg_for(pretrain_epochs=2, finetune_epochs=4)
        train_student(lambda seed: CountingToy(seed), A, self.L, cfg, [], seed=0)
        assert CountingToy.trained_on == [3, 3] + [len(self.L)] * 4

    def test_checkpoint_is_best_of_finetuning(self):
        cfg = cfg_for()
        factory = make_factory("toy", noise_rate=0.3)
        student, history = train_student(factory, [], self.L, cfg, self.split.validation, seed=2)
        assert evaluate_jga(student, self.split.validation) == max(history.validation_jga)

    def test_empty(self):
        with pytest.raises(EmptyTrainingSet):
            train_student(make_factory("toy"), [], [], cfg_for())


def _resources(validation=()):
    res = make_resources(cfg_for(), load_split(cfg_for()))
    res.validation, res.test = list(validation), []
    return res


class TestRunIteration:
    def state(self, n_unlabeled, teacher=None):
        L = [gold(i) for i in range(4)]
        U = [gold(100 + i, "west").unlabeled() for i in range(n_unlabeled)]
        if teacher is None:
            teacher, _ = init_teacher(L, make_factory("toy"), cfg_for().teacher_schedule)
        return STState(0, L, U, teacher)

    def test_moves_ceil_k_of_U(self):
        state, report = run_iteration(self.state(8), cfg_for(variant="none"), _resources())
        assert (len(state.labeled), len(state.unlabeled), report.n_pseudo_added) == (8, 4, 4)
        assert all(e.label_kind == "pseudo" for e in state.labeled[4:])

    def test_empty_U_is_a_no_op(self):
        before = self.state(0)
        after, report = run_iteration(before, cfg_for(), _resources())
        assert after is before and report.n_pseudo_added == 0

    def test_high_confidence_half_is_correct(self):
        U = [gold(100 + i, "west") for i in range(8)]
        teacher = ToyGenerativeModel(0, fallback="empty")
        for e in [gold(i) for i in range(4)]:
            teacher.memorize(e.input_text, e.target)
        for i, e in enumerate(U):
            if i % 2 == 0:
                teacher.memorize(e.input_text, e.target, profile=[0.98, 0.98, 0.9])
            else:
                teacher.memorize(e.input_text, BeliefState.of(("hotel", "area", "north")), profile=[0.98, 0.98, 0.2])
        state = STState(0, [gold(i) for i in range(4)], [e.unlabeled() for e in U], teacher)
        res = _resources()
        res.hidden_gold = {e.example_id: e.target for e in U}
        new, report = run_iteration(state, cfg_for(variant="none"), res)
        added = new.labeled[4:]
        assert {e.example_id for e in added} == {U[i].example_id for i in range(0, 8, 2)}
        assert all(e.target == res.hidden_gold[e.example_id] for e in added)
        assert report.selected_pseudo_jga == 1.0

    def test_augments_labeled_pool_including_pseudo(self):
        state, report = run_iteration(self.state(8), cfg_for(variant="mlm_maintain"), _resources())
        assert report.n_augmented == len(state.labeled) == 8

    def test_gold_source_augments_gold_only(self):
        _, report = run_iteration(self.state(8), cfg_for(variant="mlm_maintain", augment_source="gold"), _resources())
        assert report.n_augmented == 4


class TestRun:
    def test_max_iterations_zero(self):
        result = run(cfg_for(max_iterations=0))
        assert len(result.reports) == 1 and result.stop_reason == "max_iterations"

    def test_k_one_exhausts_in_one_iteration(self):
        result = run(cfg_for(k=1.0, max_iterations=5))
        assert result.state.iteration == 1 and result.stop_reason == "unlabeled_exhausted"

    def test_pool_recurrence_and_invariants(self):
        result = run(cfg_for(max_iterations=4, synthetic_dialogues=60))
        reports = result.reports
        total = reports[0].n_labeled + reports[0].n_unlabeled
        for prev, cur in zip(reports, reports[1:]):
            assert cur.n_labeled == prev.n_labeled + math.ceil(0.5 * prev.n_unlabeled)
            assert cur.n_labeled + cur.n_unlabeled == total
            assert cur.n_pseudo_added == math.ceil(0.5 * prev.n_unlabeled)

    def test_validation_patience(self):
        result = run(cfg_for(max_iterations=20, st_patience=1, synthetic_dialogues=80))
        jgas = [r.validation_jga for r in result.reports]
        if result.stop_reason == "validation_patience":
            assert jgas[-1] <= max(jgas[:-1])
        else:
            assert result.stop_reason == "unlabeled_exhausted"

    def test_run_directory_and_schemas(self, tmp_path):
        result = run(cfg_for(), tmp_path / "r")
        d = tmp_path / "r"
        assert (d / "config.conf").is_file() and (d / "split.json").is_file() and (d / "summary.json").is_file()
        assert last_complete_iteration(d) == 2
        for i in range(3):
            jsonschema.validate(json.loads((d / "iterations" / f"{i:03d}" / "report.json").read_text()), REPORT_SCHEMA)
        summary = json.loads((d / "summary.json").read_text())
        jsonschema.validate(summary, SUMMARY_SCHEMA)
        assert summary == result.summary
        assert "wall_time" not in json.dumps(summary)
        assert set(json.loads((d / "timings.json").read_text())) == {"0", "1", "2"}

    def test_labels_are_frozen_across_iterations(self, tmp_path):
        run(cfg_for(max_iterations=3), tmp_path)
        pools = [json.loads((tmp_path / "iterations" / f"{i:03d}" / "state.json").read_text()) for i in range(4)]
        for prev, cur in zip(pools, pools[1:]):
            cur_by_id = {e["example_id"]: e for e in cur["labeled"]}
            for e in prev["labeled"]:
                assert cur_by_id[e["example_id"]] == e

    def test_deterministic(self, tmp_path):
        a = run(cfg_for(), tmp_path / "a")
        b = run(cfg_for(), tmp_path / "b")
        assert a.summary == b.summary
        for i in range(3):
            sub = f"iterations/{i:03d}"
            for name in ("report.json", "state.json", "teacher.json"):
                assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = run(cfg_for(max_iterations=3), tmp_path / "full")
        partial = run(cfg_for(max_iterations=3), tmp_path / "cut", stop_after=1)
        assert partial.summary is None and last_complete_iteration(tmp_path / "cut") == 1
        resumed = run(cfg_for(max_iterations=3), tmp_path / "cut", resume=True)
        assert resumed.summary == full.summary

    def test_resume_ignores_torn_iteration(self, tmp_path):
        full = run(cfg_for(max_iterations=3), tmp_path)
        (tmp_path / "iterations" / "002" / "report.json").unlink()
        (tmp_path / "summary.json").unlink()
        assert last_complete_iteration(tmp_path) == 1
        assert run(cfg_for(max_iterations=3), tmp_path, resume=True).summary == full.summary

    def test_resume_needs_a_run_dir(self, tmp_path):
        with pytest.raises(ConfigError):
            run(cfg_for(), tmp_path / "nothing", resume=True)

    def test_invalid_config_creates_nothing(self, tmp_path):
        with pytest.raises(ConfigError):
            run(cfg_for(k=1.5), tmp_path / "r")
        assert not (tmp_path / "r").exists()

    def test_split_dir_source(self, tmp_path):
        from dst_selftrain.cli import main

        corpus = tmp_path / "c.jsonl"
        from dst_selftrain.dialogue_data import save_dialogues

        save_dialogues(corpus, generate_corpus(30, seed=1))
        assert main(["prepare", "--in", str(corpus), "--fraction", "0.2", "--out", str(tmp_path / "s")]) == 0
        cfg = ExperimentConfig(split_dir=str(tmp_path / "s"), max_iterations=1)
        split = load_split(cfg)
        assert split.labeled and all(e.target is None for e in split.unlabeled)
        assert run(cfg).state.iteration == 1


class TestConfig:
    def test_defaults_follow_published_setup(self):
        c = ExperimentConfig()
        assert (c.labeled_fraction, c.k, c.mask_rate, c.criterion, c.method) == (0.1, 0.5, 0.2, "average", "top_k")
        assert (c.pretrain_epochs, c.finetune_epochs, c.batch_size, c.learning_rate) == (20, 10, 128, 5e-5)
        assert c.training_mode == "separate"

    def test_parse_text(self):
        flat = parse_config_text("# comment\n\nselect.k = 0.3  # inline\nseed=4\n")
        assert flat == {"select.k": "0.3", "seed": "4"}
        with pytest.raises(ConfigError):
            parse_config_text("no equals sign")

    def test_round_trip(self):
        c = cfg_for(criterion="max", k=0.25)
        assert ExperimentConfig.from_flat(parse_config_text(c.to_text())) == c
        assert c.digest() != cfg_for().digest()

    @pytest.mark.parametrize(
        "flat",
        [{"select.k": "1.5"}, {"select.criterion": "median"}, {"ppaug.rate": "2"}, {"train.mode": "joint"},
         {"data.labeled_fraction": "0"}, {"train.finetune.max_epochs": "0"}],
    )
    def test_validation(self, flat):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_flat({"data.synthetic_dialogues": "10", **flat}).validate()

    def test_needs_one_data_source(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().validate()

    def test_unknown_and_unparseable_keys(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_flat({"select.kk": "1"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_flat({"seed": "x"})

    def test_relative_paths_resolve_against_file(self, tmp_path):
        (tmp_path / "split").mkdir()
        conf = tmp_path / "x.conf"
        conf.write_text("data.split_dir = split\n")
        assert load_config(conf).split_dir == str((tmp_path / "split").resolve())


def test_resources_use_configured_backend():
    res = make_resources(cfg_for(noise_rate=0.4), load_split(cfg_for()))
    assert isinstance(res, Resources) and res.factory(1).noise_rate == 0.4
    assert len(build_examples(generate_corpus(40, seed=3))) == sum(
        len(x) for x in (load_split(cfg_for()).labeled, load_split(cfg_for()).unlabeled,
                         load_split(cfg_for()).validation, load_split(cfg_for()).test)
    )
