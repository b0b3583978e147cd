import pytest

from advids.attack import attack_batch, stack_perturbed
from advids.config import AttackConfig, ClassifierTrainConfig, GanConfig
from advids.data import (
    APPLICATION, BINARY, CONTINUOUS, DEFAULT_CATEGORICAL_COLUMNS, DEFAULT_DROP_COLUMNS, NETWORK, ONE_HOT,
    ColumnSpec, FeatureSchema, clean, encode, fit_schema, load_csv, load_grouping, split_indices_stratified,
    split_stratified,
)
from advids.gan import ValidationSet, train_gan
from advids.models import ClassifierConfig, build_classifier, train_classifier
from advids.numerics import Rng
from advids.sample import write_sample


@pytest.fixture
def rng():
    return Rng(0)


@pytest.fixture
def small_schema():
    """7 列：application = 连续 + 二值 + 3 列 one-hot，network = 连续 + 二值"""
    return FeatureSchema(columns=[
        ColumnSpec(name="a_cont", source="a_cont", group=APPLICATION, kind=CONTINUOUS, observed_max=10.0),
        ColumnSpec(name="a_bin", source="a_bin", group=APPLICATION, kind=BINARY),
        ColumnSpec(name="proto_ICMP", source="proto", group=APPLICATION, kind=ONE_HOT, group_id="proto",
                   category="ICMP"),
        ColumnSpec(name="proto_TCP", source="proto", group=APPLICATION, kind=ONE_HOT, group_id="proto",
                   category="TCP"),
        ColumnSpec(name="proto_UDP", source="proto", group=APPLICATION, kind=ONE_HOT, group_id="proto",
                   category="UDP"),
        ColumnSpec(name="n_cont", source="n_cont", group=NETWORK, kind=CONTINUOUS, observed_max=5.0),
        ColumnSpec(name="n_bin", source="n_bin", group=NETWORK, kind=BINARY),
    ])


@pytest.fixture(scope="session")
def sample_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("sample") / "edge_iiot_sample.csv"
    write_sample(str(path))
    return str(path)


@pytest.fixture(scope="session")
def sample_split(sample_csv):
    """(schema, train, test)，在样例数据上按默认配置预处理"""
    table = clean(load_csv(sample_csv, drop_columns=DEFAULT_DROP_COLUMNS), DEFAULT_CATEGORICAL_COLUMNS)
    train_idx, test_idx = split_indices_stratified(table.label_indices(), 0.2, seed=42)
    schema = fit_schema(table.take(train_idx), load_grouping(None), DEFAULT_CATEGORICAL_COLUMNS)
    return schema, encode(table.take(train_idx), schema), encode(table.take(test_idx), schema)


@pytest.fixture(scope="session")
def trained_classifier(sample_split):
    """(model, history)：样例训练集上按默认配置训练 15 轮"""
    schema, train, test = sample_split
    rng = Rng(42)
    model = build_classifier(ClassifierConfig(input_width=schema.width), rng.child(0))
    history = train_classifier(model, train, ClassifierTrainConfig(), rng.child(1), eval_set=test)
    return model, history


@pytest.fixture(scope="session")
def adversarial_test(trained_classifier, sample_split):
    """默认攻击配置 (ε=0.01, 只保留攻击成功的样本) 作用于样例测试集的结果"""
    model, _ = trained_classifier
    _, _, test = sample_split
    return attack_batch(model, test, AttackConfig())


@pytest.fixture(scope="session")
def trained_gate(trained_classifier, sample_split):
    """
    GanResult：FGSM 样本并入判别器训练流，并在留出集上校准阈值

    训练集先按 9:1 划出验证集，两部分都用不筛选的 FGSM 生成对抗样本。
    """
    model, _ = trained_classifier
    schema, train, _ = sample_split
    config = GanConfig(seed=42, fgsm_in_training=True, calibrate=True)
    gan_train, held_out = split_stratified(train, config.validation_fraction, seed=42)
    augment = AttackConfig(filter_successful=False)
    validation = ValidationSet(
        real=held_out.features,
        adversarial=stack_perturbed(attack_batch(model, held_out, augment).examples, schema.width),
    )
    adversarial = stack_perturbed(attack_batch(model, gan_train, augment).examples, schema.width)
    return train_gan(gan_train, config, adversarial, validation)
