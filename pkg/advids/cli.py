"""
命令行入口：preprocess -> train-clf -> attack -> train-gan -> detect -> evaluate

每个阶段把产物写到 artifacts_dir，并写出 manifest-<stage>.json（种子、配置摘要、指标摘要、产物校验和）。
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
from typing import Any, Callable, Dict, List, Optional

from advids import __version__
from advids.attack import (
    attack_batch, load_adversarial_set, matrix_validity, perturbation_stats, save_adversarial_set,
    stack_perturbed, validity_analysis,
)
from advids.config import Config, setup_logging
from advids.data import (
    Dataset, FeatureSchema, clean, distribution_table, encode, fit_schema, format_distribution, load_csv,
    load_dataset_cache, load_grouping, load_schema, edge_iiot_test_counts, save_dataset_cache, save_schema,
    split_indices_stratified, split_stratified, subsample_stratified,
)
from advids.exceptions import (
    AdvidsError, ArtifactConflictError, ConfigError, IngestionError, MissingPrerequisiteError, StatsError,
)
from advids.gan import ValidationSet, train_gan
from advids.metrics import classification_report, confusion_matrix, confusion_to_csv, format_report, report_to_dict
from advids.models import (
    CLASSIFIER, DISCRIMINATOR, GENERATOR, ClassifierConfig, build_classifier, load_checkpoint, save_checkpoint,
    train_classifier,
)
from advids.numerics import Rng
from advids.pipeline import Classified, TwoStageDetector, detect_batch, evaluate_pipeline
from advids.sample import SAMPLE_ROWS_PER_CLASS, SAMPLE_SEED, write_sample

logger = logging.getLogger(__name__)

STAGES = ("preprocess", "train-clf", "attack", "train-gan", "detect", "evaluate")

OUTPUTS: Dict[str, List[str]] = {
    "preprocess": ["schema.json", "train.cache", "test.cache", "distribution.txt"],
    "train-clf": ["classifier.ckpt"],
    "attack": ["adversarial.csv", "adversarial.json", "adversarial_confusion.csv", "adversarial_report.txt"],
    "train-gan": ["generator.ckpt", "discriminator.ckpt", "gan_trace.csv"],
    "detect": ["detections.json"],
    "evaluate": ["report.json", "report.txt", "confusion.csv"],
}

PREREQUISITES: Dict[str, List[str]] = {
    "preprocess": [],
    "train-clf": ["preprocess"],
    "attack": ["preprocess", "train-clf"],
    "train-gan": ["preprocess"],
    "detect": ["preprocess", "train-clf", "train-gan"],
    "evaluate": ["preprocess", "train-clf", "attack", "train-gan"],
}

# 各阶段读取的配置段；阶段摘要由这些配置段与上游阶段的摘要共同决定
STAGE_SECTIONS: Dict[str, List[str]] = {
    "preprocess": ["seed", "data"],
    "train-clf": ["seed", "classifier"],
    "attack": ["attack"],
    "train-gan": ["seed", "gan"],
    "detect": [],
    "evaluate": [],
}

LOCK_FILE = ".advids.lock"


def _dump_json(document: Any, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Runner:
    """单个命令的生命周期：startup（日志、目录锁）-> run -> shutdown（释放锁）"""

    def __init__(self, config: Config, force: bool = False):
        self.config = config
        self.force = force
        self.artifacts_dir = config.artifacts_dir
        self._lock_path = os.path.join(self.artifacts_dir, LOCK_FILE)
        self._locked = False
        self._handlers: Dict[str, Callable[[], Dict[str, Any]]] = {
            "preprocess": self.cmd_preprocess,
            "train-clf": self.cmd_train_clf,
            "attack": self.cmd_attack,
            "train-gan": self.cmd_train_gan,
            "detect": self.cmd_detect,
            "evaluate": self.cmd_evaluate,
        }

    def path(self, name: str) -> str:
        return os.path.join(self.artifacts_dir, name)

    def startup(self):
        setup_logging(self.config.log)
        os.makedirs(self.artifacts_dir, exist_ok=True)
        try:
            fd = os.open(self._lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ArtifactConflictError(f"产物目录正被另一个进程使用: {self._lock_path}") from e
        with os.fdopen(fd, 'w') as f:
            f.write(str(os.getpid()))
        self._locked = True

    def shutdown(self):
        if self._locked:
            try:
                os.remove(self._lock_path)
            except OSError as e:
                logger.error(f"释放锁文件失败: {e}")
            self._locked = False

    def run(self, stage: str) -> Dict[str, Any]:
        self._check_prerequisites(stage)
        self._check_conflicts(stage)
        logger.info(f"开始阶段 {stage} (seed={self.config.seed})")
        summary = self._handlers[stage]()
        manifest = {
            'stage': stage,
            'version': __version__,
            'seed': self.config.seed,
            'config_hash': self.stage_hash(stage),
            'summary': summary,
            'outputs': {name: _sha256(self.path(name)) for name in OUTPUTS[stage]},
        }
        _dump_json(manifest, self.path(f"manifest-{stage}.json"))
        logger.info(f"阶段 {stage} 完成")
        return manifest

    # -- 前置检查 ---------------------------------------------------------

    def _gan_uses_fgsm(self) -> bool:
        return self.config.gan.fgsm_in_training or self.config.gan.calibrate

    def _upstream(self, stage: str) -> List[str]:
        upstream = list(PREREQUISITES[stage])
        if stage == "train-gan" and self._gan_uses_fgsm():
            upstream.append("train-clf")
        return upstream

    def stage_hash(self, stage: str) -> str:
        """阶段配置摘要：本阶段读取的配置段 + 全部上游阶段的摘要"""
        sections = list(STAGE_SECTIONS[stage])
        if stage == "train-gan" and self._gan_uses_fgsm():
            sections.append("attack")
        upstream = {name: self.stage_hash(name) for name in self._upstream(stage)}
        return self.config.config_hash(sections, {'upstream': upstream})

    def _check_prerequisites(self, stage: str):
        for upstream in self._upstream(stage):
            manifest_path = self.path(f"manifest-{upstream}.json")
            missing = [name for name in OUTPUTS[upstream] if not os.path.exists(self.path(name))]
            if not os.path.exists(manifest_path) or missing:
                raise MissingPrerequisiteError(upstream, f"缺少 {upstream} 阶段的产物，请先运行: advids {upstream}")
            with open(manifest_path, 'r', encoding='utf-8') as f:
                manifest = json.load(f)
            if manifest.get('config_hash') != self.stage_hash(upstream):
                raise ArtifactConflictError(
                    f"{upstream} 阶段的产物来自不同的配置 (config_hash 不一致)，请使用 --force 重新运行 {upstream}"
                )

    def _check_conflicts(self, stage: str):
        existing = [name for name in OUTPUTS[stage] + [f"manifest-{stage}.json"] if os.path.exists(self.path(name))]
        if existing and not self.force:
            raise ArtifactConflictError(f"产物已存在: {', '.join(existing)}；使用 --force 覆盖")

    # -- 产物读取 ---------------------------------------------------------

    def _schema(self) -> FeatureSchema:
        return load_schema(self.path("schema.json"))

    def _datasets(self):
        schema = self._schema()
        return (schema, load_dataset_cache(self.path("train.cache"), schema),
                load_dataset_cache(self.path("test.cache"), schema))

    def _detector(self) -> TwoStageDetector:
        """阈值优先取判别器检查点中校准得到的值，否则取 gan.threshold"""
        discriminator = load_checkpoint(self.path("discriminator.ckpt"), DISCRIMINATOR)
        return TwoStageDetector(
            discriminator=discriminator,
            classifier=load_checkpoint(self.path("classifier.ckpt"), CLASSIFIER),
            threshold=float(discriminator.metadata.get('threshold', self.config.gan.threshold)),
        )

    # -- 各阶段 ---------------------------------------------------------

    def cmd_preprocess(self) -> Dict[str, Any]:
        data = self.config.data
        if not data.dataset_path:
            raise ConfigError("data.dataset_path 未配置")
        if not os.path.isfile(data.dataset_path):
            raise IngestionError(f"数据集文件不存在: {data.dataset_path}")
        if data.grouping_path and not os.path.isfile(data.grouping_path):
            raise IngestionError(f"分组文件不存在: {data.grouping_path}")

        table = clean(load_csv(data.dataset_path, data.label_column, data.drop_columns),
                      data.categorical_columns, data.categorical_threshold)
        exact = edge_iiot_test_counts() if data.exact_counts else None
        train_idx, test_idx = split_indices_stratified(table.label_indices(), data.test_fraction,
                                                       self.config.seed, exact)
        train_rows, test_rows = table.take(train_idx), table.take(test_idx)
        schema = fit_schema(train_rows, load_grouping(data.grouping_path), data.categorical_columns,
                            data.expected_width)
        train, test = encode(train_rows, schema), encode(test_rows, schema)
        if data.subsample_fraction is not None:
            train = subsample_stratified(train, data.subsample_fraction, data.min_per_class, self.config.seed)
            test = subsample_stratified(test, data.subsample_fraction, data.min_per_class, self.config.seed + 1)

        save_schema(schema, self.path("schema.json"))
        save_dataset_cache(train, self.path("train.cache"))
        save_dataset_cache(test, self.path("test.cache"))
        with open(self.path("distribution.txt"), 'w', encoding='utf-8') as f:
            f.write(format_distribution(distribution_table(train, test)))
        return {
            'train_rows': len(train),
            'test_rows': len(test),
            'width': schema.width,
            'application_count': schema.application_count,
            'network_count': schema.network_count,
            'cleaning': table.cleaning.to_dict(),
            'unseen_categories': dict(test.unseen_categories),
        }

    def cmd_train_clf(self) -> Dict[str, Any]:
        schema, train, test = self._datasets()
        rng = Rng(self.config.seed)
        model = build_classifier(ClassifierConfig(input_width=schema.width), rng.child(0))
        history = train_classifier(model, train, self.config.classifier, rng.child(1), eval_set=test)
        save_checkpoint(model, self.path("classifier.ckpt"))
        last = history.epochs[-1]
        return {
            'parameters': model.parameter_count(),
            'first_loss': history.epochs[0].loss,
            'final_loss': last.loss,
            'train_accuracy': last.train_accuracy,
            'test_accuracy': last.eval_accuracy,
            'history': history.to_dict(),
        }

    def cmd_attack(self) -> Dict[str, Any]:
        schema, _, test = self._datasets()
        model = load_checkpoint(self.path("classifier.ckpt"), CLASSIFIER)
        result = attack_batch(model, test, self.config.attack)
        save_adversarial_set(result.examples, schema, self.path("adversarial.csv"))
        # 分类器在全部对抗样本上的表现（筛选之前）
        confusion = confusion_matrix(result.true_labels, result.adv_preds)
        report = classification_report(confusion)
        confusion_to_csv(confusion, self.path("adversarial_confusion.csv"))
        with open(self.path("adversarial_report.txt"), 'w', encoding='utf-8') as f:
            f.write(f"# 分类报告 (FGSM ε={self.config.attack.epsilon}, 全部 {confusion.total} 个对抗样本)\n")
            f.write(format_report(report))
        sidecar = {
            'summary': result.summary.to_dict(),
            'adversarial_report': report_to_dict(report),
            'perturbation': perturbation_stats(result.examples, schema).to_dict() if result.examples else None,
            'validity': validity_analysis(result.examples, schema).to_dict() if result.examples else None,
            'clean_validity': matrix_validity(test.features, schema).to_dict(),
        }
        _dump_json(sidecar, self.path("adversarial.json"))
        return result.summary.to_dict()

    def cmd_train_gan(self) -> Dict[str, Any]:
        schema, train, _ = self._datasets()
        gan_config = dataclasses.replace(self.config.gan, seed=self.config.gan_seed)
        adversarial = validation = None
        if self._gan_uses_fgsm():
            classifier = load_checkpoint(self.path("classifier.ckpt"), CLASSIFIER)
            augment = dataclasses.replace(self.config.attack, filter_successful=False, filter_valid=False)
            if gan_config.calibrate:
                train, held_out = split_stratified(train, gan_config.validation_fraction, gan_config.seed)
                validation = ValidationSet(
                    real=held_out.features,
                    adversarial=stack_perturbed(attack_batch(classifier, held_out, augment).examples, schema.width),
                )
            if gan_config.fgsm_in_training:
                adversarial = stack_perturbed(attack_batch(classifier, train, augment).examples, schema.width)
        result = train_gan(train, gan_config, adversarial, validation)
        save_checkpoint(result.generator, self.path("generator.ckpt"))
        save_checkpoint(result.discriminator, self.path("discriminator.ckpt"))
        result.trace.to_csv(self.path("gan_trace.csv"))
        last = result.trace.checkpoints[-1] if len(result.trace) else None
        return {
            'checkpoints': len(result.trace),
            'd_updates': result.d_updates,
            'g_updates': result.g_updates,
            'final_d_loss': last.discriminator_loss if last else None,
            'final_g_loss': last.generator_loss if last else None,
            'fgsm_in_training': gan_config.fgsm_in_training,
            'threshold': result.threshold,
            'validation': result.validation.to_dict() if result.validation is not None else None,
        }

    def cmd_detect(self) -> Dict[str, Any]:
        schema, _, test = self._datasets()
        detector = self._detector()
        document: Dict[str, Any] = {'threshold': detector.threshold}
        clean_verdicts = detect_batch(detector, test.features)
        document['clean'] = [dict(v.to_dict(), true_label=int(label))
                             for v, label in zip(clean_verdicts, test.labels)]
        summary = {'clean_rows': len(clean_verdicts),
                   'clean_gated': sum(not isinstance(v, Classified) for v in clean_verdicts)}
        if os.path.exists(self.path("manifest-attack.json")):
            examples = load_adversarial_set(self.path("adversarial.csv"), schema)
            adv_verdicts = detect_batch(detector, stack_perturbed(examples, schema.width)) if examples else []
            document['adversarial'] = [dict(v.to_dict(), true_label=e.true_label)
                                       for v, e in zip(adv_verdicts, examples)]
            summary.update({'adversarial_rows': len(adv_verdicts),
                            'adversarial_gated': sum(not isinstance(v, Classified) for v in adv_verdicts)})
        summary['stage2_calls'] = detector.stage2_calls
        document['summary'] = summary
        _dump_json(document, self.path("detections.json"))
        return summary

    def cmd_evaluate(self) -> Dict[str, Any]:
        schema, _, test = self._datasets()
        examples = load_adversarial_set(self.path("adversarial.csv"), schema)
        if not examples:
            raise StatsError("对抗样本集为空，无法评估第一阶段检测；请调整 attack 配置后重新运行 attack")
        evaluation = evaluate_pipeline(self._detector(), test, stack_perturbed(examples, schema.width))
        perturbation = perturbation_stats(examples, schema)
        validity = validity_analysis(examples, schema)
        adversarial_report = classification_report(confusion_matrix([e.true_label for e in examples],
                                                                    [e.adv_pred for e in examples]))

        report = {
            'pipeline': evaluation.to_dict(),
            'adversarial_report': report_to_dict(adversarial_report),
            'perturbation': perturbation.to_dict(),
            'validity': validity.to_dict(),
        }
        _dump_json(report, self.path("report.json"))
        confusion_to_csv(evaluation.clean_confusion, self.path("confusion.csv"))
        with open(self.path("report.txt"), 'w', encoding='utf-8') as f:
            f.write(_render_text_report(evaluation, perturbation, validity, adversarial_report))

        summary: Dict[str, Any] = {
            'real_recall': evaluation.gate.real_recall,
            'adv_recall': evaluation.gate.adv_recall,
            'suppression_rate': evaluation.suppression_rate,
            'ungated_accuracy': evaluation.ungated_report.accuracy,
            'adversarial_accuracy': adversarial_report.accuracy,
        }
        if evaluation.clean_report is not None:
            summary.update({
                'accuracy': evaluation.clean_report.accuracy,
                'weighted_precision': evaluation.clean_report.weighted.precision,
                'weighted_recall': evaluation.clean_report.weighted.recall,
                'weighted_f1': evaluation.clean_report.weighted.f1,
            })
        return summary


def _render_text_report(evaluation, perturbation, validity, adversarial_report) -> str:
    parts = ["# 第一阶段检测 (GAN 判别器)\n", evaluation.gate.format(), "\n"]
    parts.append("# 两阶段分类报告 (通过门控的干净样本)\n")
    if evaluation.clean_report is not None:
        parts.append(format_report(evaluation.clean_report))
    else:
        parts.append("门控拦截了全部干净样本\n")
    parts.append(f"\nsuppressed: {evaluation.suppression_rate:.2%}\n")
    for name, count in evaluation.suppressed.items():
        if count:
            parts.append(f"  {name:<24}{count:>8}\n")
    parts.append("\n# 分类报告 (未经门控)\n")
    parts.append(format_report(evaluation.ungated_report))
    parts.append("\n# 分类报告 (保留的对抗样本, 未经门控)\n")
    parts.append(format_report(adversarial_report))
    parts.append("\n# 扰动统计\n")
    parts.append(f"{'group':<14}{'mean count':>12}{'max count':>11}{'mean L2':>10}{'max Linf':>10}\n")
    for group in perturbation.groups.values():
        parts.append(f"{group.group:<14}{group.mean_perturbed_count:>12.2f}{group.max_perturbed_count:>11}"
                     f"{group.mean_l2:>10.4f}{group.max_linf:>10.4f}\n")
    parts.append("\n# 有效性分析 (% 无效)\n")
    parts.append(f"{'group':<14}{'range':>10}{'binary':>10}{'class':>10}\n")
    for group in validity.groups.values():
        parts.append(f"{group.group:<14}{group.pct_invalid_range:>10.2f}{group.pct_invalid_binary:>10.2f}"
                     f"{group.pct_invalid_class_belonging:>10.2f}\n")
    return "".join(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advids", description="GAN 判别器门控 + CNN 的两阶段入侵检测")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub = commands.add_parser(stage)
        sub.add_argument("--config", required=True, help="YAML 或 JSON 配置文件")
        sub.add_argument("--force", action="store_true", help="覆盖已有产物")
        sub.add_argument("--seed", type=int, default=None, help="覆盖配置中的 seed")
    sample = commands.add_parser("sample", help="写出 1,500 行合成样例数据集")
    sample.add_argument("--output", required=True)
    sample.add_argument("--rows-per-class", type=int, default=SAMPLE_ROWS_PER_CLASS)
    sample.add_argument("--seed", type=int, default=SAMPLE_SEED)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """返回退出码：0 成功，1 输入错误，2 产物冲突，3 缺少前置产物，4 数值发散"""
    args = build_parser().parse_args(argv)
    if args.command == "sample":
        setup_logging()
        rows = write_sample(args.output, args.rows_per_class, args.seed)
        logger.info(f"样例数据集已写出: {args.output} ({rows} 行)")
        return 0

    runner: Optional[Runner] = None
    try:
        overrides = {'seed': args.seed} if args.seed is not None else None
        runner = Runner(Config(args.config, overrides), force=args.force)
        runner.startup()
        runner.run(args.command)
        return 0
    except MissingPrerequisiteError as e:
        logger.error(f"缺少前置阶段 {e.stage}: {e}")
        return e.exit_code
    except AdvidsError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} 异常退出: {e}")
        return 1
    finally:
        if runner is not None:
            runner.shutdown()
