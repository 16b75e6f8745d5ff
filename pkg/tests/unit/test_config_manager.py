# tests/unit/test_config_manager.py
import pytest
import yaml
from pathlib import Path

from src.config_manager import (
    DEFAULT_CONFIG,
    OUTPUT_DIR_ENV,
    ConfigManager,
    DataConfig,
    OutputConfig,
    parse_override,
    parse_sweep_values,
    resolve_key,
    sweep_key,
)
from src.utils.validators import ValidationError

pytestmark = pytest.mark.unit


class TestDataConfig:
    """测试数据配置类"""

    def test_from_dict(self):
        """测试从字典创建DataConfig"""
        data = dict(DEFAULT_CONFIG['data'], source='csv', csv_path='data/x.csv')
        config = DataConfig.from_dict(data)

        assert config.source == 'csv'
        assert config.csv_path == Path('data/x.csv')
        assert config.mask_path is None
        assert config.separation == 6.0

    def test_output_root_override(self):
        config = OutputConfig.from_dict(DEFAULT_CONFIG['output'], root=Path('/tmp/elsewhere'))
        assert config.root == Path('/tmp/elsewhere')
        assert config.checkpoint is True


class TestOverrides:
    """测试覆盖项解析"""

    def test_dotted_key(self):
        assert parse_override('train.lambda1=0.5') == ('train.lambda1', 0.5)

    def test_bare_key_resolves_section(self):
        assert resolve_key('kappa') == 'train.kappa'
        assert resolve_key('seed') == 'seed'

    def test_yaml_scalars(self):
        assert parse_override('use_proto_loss=false') == ('train.use_proto_loss', False)
        assert parse_override('hidden_dims=[16, 8]') == ('encoder.hidden_dims', [16, 8])
        assert parse_override('csv_path=') == ('data.csv_path', None)

    @pytest.mark.parametrize("text", ['no_equals', 'train.unknown=1', 'train=1', 'bogus=3'])
    def test_invalid(self, text):
        with pytest.raises(ValidationError):
            parse_override(text)


class TestConfigManager:
    """测试配置管理器"""

    def test_defaults_without_file(self):
        manager = ConfigManager()

        assert manager.config == DEFAULT_CONFIG
        assert manager.config is not DEFAULT_CONFIG
        assert manager.seed == 0

    def test_load_config(self, config_manager):
        """测试加载配置文件并与默认值合并"""
        assert config_manager.seed == 3
        assert config_manager.get_data_config().num_classes == 4
        assert config_manager.get_train_section()['num_prototypes'] == 8
        # 文件未给出的键取默认值
        assert config_manager.get_train_section()['temperature'] == 0.1
        assert config_manager.get_logging_config()['level'] == 'WARNING'

    def test_missing_file(self, temp_dir):
        with pytest.raises(ValidationError):
            ConfigManager(str(temp_dir / 'missing.yaml'))

    def test_unknown_key_in_file(self, temp_dir):
        path = temp_dir / 'bad.yaml'
        path.write_text(yaml.safe_dump({'train': {'epochz': 3}}), encoding='utf-8')

        with pytest.raises(ValidationError) as exc_info:
            ConfigManager(str(path))
        assert exc_info.value.key == 'train.epochz'

    @pytest.mark.parametrize("override", [
        'train.temperature=0',
        'split.label_fraction=1.5',
        'train.kappa=60',
        'data.source=csv',
        'train.batch_size=1',
        'encoder.activation=sigmoid',
    ])
    def test_invalid_values(self, override):
        with pytest.raises(ValidationError):
            ConfigManager(overrides=[override])

    def test_override_precedence(self, config_file):
        manager = ConfigManager(str(config_file), overrides=['seed=9', 'lambda2=0.25'])

        assert manager.seed == 9
        assert manager.get_value('train.lambda2') == 0.25
        assert manager.get_value('num_classes') == 4

    def test_derive_leaves_original(self, config_manager):
        derived = config_manager.derive({'train.lambda1': 0.0, 'seed': 7})

        assert derived.get_value('train.lambda1') == 0.0
        assert derived.seed == 7
        assert config_manager.get_value('train.lambda1') == 1.0
        assert config_manager.seed == 3

    def test_output_root_precedence(self, config_manager, monkeypatch, temp_dir):
        assert config_manager.output_root() == temp_dir / 'runs'

        monkeypatch.setenv(OUTPUT_DIR_ENV, str(temp_dir / 'env'))
        assert config_manager.output_root() == temp_dir / 'env'
        assert config_manager.output_root(str(temp_dir / 'cli')) == temp_dir / 'cli'
        assert config_manager.get_output_config().root == temp_dir / 'env'

    def test_save_config_round_trip(self, config_manager, temp_dir):
        path = config_manager.save_config(temp_dir / 'out' / 'config.yaml')
        reloaded = ConfigManager(str(path))

        assert reloaded.effective() == config_manager.effective()

    def test_effective_is_copy(self, config_manager):
        snapshot = config_manager.effective()
        snapshot['train']['epochs'] = 999
        assert config_manager.get_value('train.epochs') == 2


class TestSweepHelpers:
    """测试扫参辅助函数"""

    def test_sweep_key(self):
        assert sweep_key('lambda1') == 'train.lambda1'
        assert sweep_key('split.label_fraction') == 'split.label_fraction'

    def test_sweep_key_unknown(self):
        with pytest.raises(ValidationError):
            sweep_key('activation')

    def test_parse_values(self):
        assert parse_sweep_values(['0', '0.5', '2']) == [0, 0.5, 2]

    @pytest.mark.parametrize("values", [[], ['abc'], ['true']])
    def test_parse_values_invalid(self, values):
        with pytest.raises(ValidationError):
            parse_sweep_values(values)
