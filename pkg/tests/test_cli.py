import json
import os

import pandas as pd
import pytest
import yaml

from advids.cli import LOCK_FILE, OUTPUTS, STAGES, build_parser, main
from advids.config import AttackConfig, ClassifierTrainConfig
from advids.exceptions import DivergenceError

MANIFEST_KEYS = {'stage', 'version', 'seed', 'config_hash', 'summary', 'outputs'}


def _write_config(directory, dataset_path, artifacts_dir, **sections):
    """写出流水线配置：分类器与攻击使用默认值，GAN 只训练一轮"""
    document = {
        'seed': 42,
        'artifacts_dir': str(artifacts_dir),
        'data': {'dataset_path': str(dataset_path)},
        'gan': {'epochs': 1, 'noise_dim': 16, 'batch_size': 64, 'checkpoint_interval': 5,
                'fgsm_in_training': True, 'calibrate': True},
        'log': {'level': 'WARNING'},
    }
    for key, value in sections.items():
        document[key] = {**document.get(key, {}), **value} if isinstance(value, dict) else value
    path = os.path.join(str(directory), f"config-{os.path.basename(str(artifacts_dir))}.yaml")
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(document, f)
    return path


def _run_all(config_path):
    return [main([stage, "--config", config_path]) for stage in STAGES]


def _read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


@pytest.fixture(scope="module")
def pipeline_runs(sample_csv, tmp_path_factory):
    """在两个独立的产物目录中各跑一遍完整流水线"""
    base = tmp_path_factory.mktemp("cli")
    dirs = [base / "run-a", base / "run-b"]
    codes = [_run_all(_write_config(base, sample_csv, d)) for d in dirs]
    return dirs, codes


class TestPipeline:
    """端到端流水线"""

    def test_all_stages_succeed(self, pipeline_runs):
        dirs, codes = pipeline_runs
        assert codes == [[0] * len(STAGES)] * 2
        for stage in STAGES:
            for name in OUTPUTS[stage]:
                assert (dirs[0] / name).exists()
            manifest = _read_json(dirs[0] / f"manifest-{stage}.json")
            assert set(manifest) == MANIFEST_KEYS
            assert manifest['stage'] == stage and manifest['seed'] == 42
            assert set(manifest['outputs']) == set(OUTPUTS[stage])
        assert not (dirs[0] / LOCK_FILE).exists()

    def test_preprocess_outputs(self, pipeline_runs):
        dirs, _ = pipeline_runs
        summary = _read_json(dirs[0] / "manifest-preprocess.json")['summary']
        assert summary['width'] == 95
        assert summary['application_count'] == 77 and summary['network_count'] == 18
        assert summary['train_rows'] == 1200 and summary['test_rows'] == 300
        assert "Attack Classes" in (dirs[0] / "distribution.txt").read_text(encoding="utf-8")

    def test_classifier_summary(self, pipeline_runs):
        dirs, _ = pipeline_runs
        summary = _read_json(dirs[0] / "manifest-train-clf.json")['summary']
        assert summary['parameters'] == 54079
        assert len(summary['history']['epochs']) == ClassifierTrainConfig().epochs

    def test_default_attack_keeps_successes(self, pipeline_runs):
        dirs, _ = pipeline_runs
        summary = _read_json(dirs[0] / "manifest-attack.json")['summary']
        assert summary['epsilon'] == AttackConfig().epsilon
        assert summary['total'] == 300
        assert summary['adversarial_accuracy'] <= 0.20
        assert 1 <= summary['kept'] == round(summary['success_rate'] * 300)
        assert len(pd.read_csv(dirs[0] / "adversarial.csv")) == summary['kept']

    def test_adversarial_classification_report(self, pipeline_runs):
        dirs, _ = pipeline_runs
        confusion = pd.read_csv(dirs[0] / "adversarial_confusion.csv", index_col=0)
        assert confusion.shape == (15, 15)
        assert int(confusion.values.sum()) == 300
        sidecar = _read_json(dirs[0] / "adversarial.json")
        summary = sidecar['summary']
        assert sidecar['adversarial_report']['accuracy'] == pytest.approx(summary['adversarial_accuracy'])
        assert "weighted avg" in (dirs[0] / "adversarial_report.txt").read_text(encoding="utf-8")

    def test_calibrated_gate(self, pipeline_runs):
        dirs, _ = pipeline_runs
        summary = _read_json(dirs[0] / "manifest-train-gan.json")['summary']
        assert 0 < summary['threshold'] < 1
        assert summary['validation'] is not None

    def test_detections(self, pipeline_runs):
        dirs, _ = pipeline_runs
        kept = _read_json(dirs[0] / "manifest-attack.json")['summary']['kept']
        document = _read_json(dirs[0] / "detections.json")
        assert len(document['clean']) == 300 and len(document['adversarial']) == kept
        assert all(v['verdict'] in ('adversarial', 'classified') for v in document['clean'])
        classified = sum(v['verdict'] == 'classified' for v in document['clean'] + document['adversarial'])
        assert document['summary']['stage2_calls'] == classified

    def test_report(self, pipeline_runs):
        dirs, _ = pipeline_runs
        kept = _read_json(dirs[0] / "manifest-attack.json")['summary']['kept']
        report = _read_json(dirs[0] / "report.json")
        assert set(report) == {'pipeline', 'adversarial_report', 'perturbation', 'validity'}
        gate = report['pipeline']['gate']
        assert gate['true_positive'] + gate['false_negative'] == kept
        assert gate['true_negative'] + gate['false_positive'] == 300
        assert report['pipeline']['ungated_report']['total'] == 300
        # 保留的样本都是攻击成功的样本
        assert report['adversarial_report']['total'] == kept
        assert report['adversarial_report']['accuracy'] == 0.0
        assert report['perturbation']['groups']['application']['max_perturbed_count'] <= 77
        assert report['perturbation']['groups']['network']['max_perturbed_count'] <= 18
        text = (dirs[0] / "report.txt").read_text(encoding="utf-8")
        assert "weighted avg" in text
        confusion = pd.read_csv(dirs[0] / "confusion.csv", index_col=0)
        assert confusion.shape == (15, 15)

    def test_deterministic_across_directories(self, pipeline_runs):
        dirs, _ = pipeline_runs
        assert (dirs[0] / "report.json").read_bytes() == (dirs[1] / "report.json").read_bytes()
        for stage in STAGES:
            name = f"manifest-{stage}.json"
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()


class TestExitCodes:
    """退出码"""

    def test_rerun_requires_force(self, sample_csv, tmp_path):
        config = _write_config(tmp_path, sample_csv, tmp_path / "artifacts")
        assert main(["preprocess", "--config", config]) == 0
        assert main(["preprocess", "--config", config]) == 2
        assert main(["preprocess", "--config", config, "--force"]) == 0

    def test_held_lock(self, sample_csv, tmp_path):
        artifacts = tmp_path / "artifacts"
        artifacts.mkdir()
        (artifacts / LOCK_FILE).write_text("1", encoding="utf-8")
        config = _write_config(tmp_path, sample_csv, artifacts)
        assert main(["preprocess", "--config", config]) == 2
        assert (artifacts / LOCK_FILE).exists()
        assert not (artifacts / "schema.json").exists()

    def test_missing_prerequisite(self, sample_csv, tmp_path):
        config = _write_config(tmp_path, sample_csv, tmp_path / "artifacts")
        assert main(["train-clf", "--config", config]) == 3
        assert main(["preprocess", "--config", config]) == 0
        assert main(["evaluate", "--config", config]) == 3
        assert not (tmp_path / "artifacts" / LOCK_FILE).exists()

    def test_upstream_config_mismatch(self, sample_csv, tmp_path):
        config = _write_config(tmp_path, sample_csv, tmp_path / "artifacts")
        assert main(["preprocess", "--config", config]) == 0
        assert main(["train-clf", "--config", config, "--seed", "7"]) == 2

    def test_missing_label_column(self, tmp_path):
        dataset = tmp_path / "no_label.csv"
        dataset.write_text("tcp.len,tcp.flags\n1,2\n3,4\n", encoding="utf-8")
        config = _write_config(tmp_path, dataset, tmp_path / "artifacts")
        assert main(["preprocess", "--config", config]) == 1

    def test_missing_dataset(self, tmp_path):
        config = _write_config(tmp_path, tmp_path / "absent.csv", tmp_path / "artifacts")
        assert main(["preprocess", "--config", config]) == 1

    def test_invalid_config(self, sample_csv, tmp_path):
        config = _write_config(tmp_path, sample_csv, tmp_path / "artifacts", attack={'epsilon': 2.0})
        assert main(["preprocess", "--config", config]) == 1

    def test_divergence(self, sample_csv, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise DivergenceError(3, "非有限损失")

        monkeypatch.setattr("advids.cli.train_gan", diverge)
        config = _write_config(tmp_path, sample_csv, tmp_path / "artifacts",
                               gan={'fgsm_in_training': False, 'calibrate': False})
        assert main(["preprocess", "--config", config]) == 0
        assert main(["train-gan", "--config", config]) == 4
        assert not (tmp_path / "artifacts" / "manifest-train-gan.json").exists()

    def test_fgsm_gate_requires_classifier(self, sample_csv, tmp_path):
        config = _write_config(tmp_path, sample_csv, tmp_path / "artifacts")
        assert main(["preprocess", "--config", config]) == 0
        assert main(["train-gan", "--config", config]) == 3


class TestStageHash:
    """阶段配置摘要只覆盖该阶段读取的配置段及其上游"""

    @pytest.fixture
    def trained(self, sample_csv, tmp_path):
        artifacts = tmp_path / "artifacts"
        config = _write_config(tmp_path, sample_csv, artifacts, classifier={'epochs': 1})
        assert main(["preprocess", "--config", config]) == 0
        assert main(["train-clf", "--config", config]) == 0
        return artifacts

    def test_epsilon_change_keeps_classifier(self, sample_csv, tmp_path, trained):
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 1}, attack={'epsilon': 0.02})
        assert main(["attack", "--config", config]) == 0
        summary = _read_json(trained / "manifest-attack.json")['summary']
        assert summary['epsilon'] == 0.02

    def test_epsilon_change_reruns_attack(self, sample_csv, tmp_path, trained):
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 1})
        assert main(["attack", "--config", config]) == 0
        before = _read_json(trained / "manifest-attack.json")['config_hash']
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 1}, attack={'epsilon': 0.05})
        assert main(["attack", "--config", config, "--force"]) == 0
        assert _read_json(trained / "manifest-attack.json")['config_hash'] != before
        assert _read_json(trained / "manifest-train-clf.json")['summary']['parameters'] == 54079

    def test_classifier_change_blocks_attack(self, sample_csv, tmp_path, trained):
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 2})
        assert main(["attack", "--config", config]) == 2

    def test_data_change_blocks_classifier(self, sample_csv, tmp_path, trained):
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 1}, data={'test_fraction': 0.3})
        assert main(["train-clf", "--config", config, "--force"]) == 2

    def test_attack_change_blocks_fgsm_gate(self, sample_csv, tmp_path, trained):
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 1})
        assert main(["train-gan", "--config", config]) == 0
        assert main(["detect", "--config", config]) == 0
        config = _write_config(tmp_path, sample_csv, trained, classifier={'epochs': 1}, attack={'epsilon': 0.05})
        assert main(["detect", "--config", config, "--force"]) == 2


class TestSampleCommand:
    """样例数据集子命令"""

    def test_writes_sample(self, tmp_path):
        path = tmp_path / "sample.csv"
        assert main(["sample", "--output", str(path), "--rows-per-class", "2"]) == 0
        frame = pd.read_csv(path)
        assert len(frame) == 30
        assert frame['Attack_type'].value_counts().min() == 2

    def test_parser_requires_config(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["preprocess"])


if __name__ == "__main__":
    pytest.main([__file__])
