"""
配置管理、日志与异常处理测试
"""

import json

import pytest
from pydantic import ValidationError

from utils.config_manager import AppConfig, CkaConfig, DinoConfig, ProbeConfig, ToyEncoderConfig
from utils.exceptions import (
    ActivationStoreException,
    CkaException,
    DegenerateInputException,
    LayerSimException,
    TrainingDivergenceException,
    handle_exceptions,
)
from utils.log_manager import configure_logger, get_logger
from utils.models import RunConfig


class TestAppConfig:
    """测试应用配置"""

    def test_defaults(self):
        """测试默认值"""
        config = AppConfig.create_default()

        assert config.cka.batch_size_utterances == 4
        assert config.cka.min_examples_per_batch == 4
        assert config.dino.teacher_temp == 0.04
        assert config.dino.student_temp == 0.1
        assert config.dino.center_momentum == 0.9
        assert config.dino.teacher_momentum == 0.99
        assert config.supervised.aam.margin == 0.2
        assert config.supervised.aam.scale == 30.0

    def test_missing_file_falls_back_to_defaults(self, tmp_path):
        """测试配置文件不存在时使用默认配置"""
        config = AppConfig.load_from_file(str(tmp_path / "none.yaml"))
        assert config == AppConfig.create_default()

    def test_save_and_load(self, tmp_path):
        """测试保存后读回一致"""
        config = AppConfig(cka=CkaConfig(batch_size_utterances=8, shuffle_seed=3))
        path = tmp_path / "config.yaml"
        config.save_to_file(str(path))

        assert AppConfig.load_from_file(str(path)) == config

    def test_partial_file_keeps_other_defaults(self, tmp_path):
        """测试只覆盖部分字段"""
        path = tmp_path / "config.yaml"
        path.write_text("probe:\n  steps: 50\n", encoding="utf-8")

        config = AppConfig.load_from_file(str(path))

        assert config.probe.steps == 50
        assert config.probe.learning_rate == 0.2
        assert config.cka == CkaConfig()

    def test_env_variable_substitution(self, tmp_path, monkeypatch):
        """测试 ${VAR} 环境变量替换"""
        monkeypatch.setenv("LAYERSIM_LOG_DIR", str(tmp_path / "custom_logs"))
        path = tmp_path / "config.yaml"
        path.write_text("logging:\n  log_dir: ${LAYERSIM_LOG_DIR}\n", encoding="utf-8")

        assert AppConfig.load_from_file(str(path)).logging.log_dir == str(tmp_path / "custom_logs")

    def test_min_examples_below_four_rejected(self):
        """测试每批最少帧数必须 >= 4"""
        with pytest.raises(ValidationError) as exc_info:
            CkaConfig(min_examples_per_batch=3)
        assert "min_examples_per_batch" in str(exc_info.value)

    def test_holdout_fraction_range(self):
        """测试留出比例"""
        with pytest.raises(ValidationError):
            ProbeConfig(holdout_fraction=1.0)

    def test_unknown_activation(self):
        """测试不支持的非线性"""
        with pytest.raises(ValidationError):
            ToyEncoderConfig(activation="gelu")

    def test_smooth_requires_square_layers(self):
        """测试 smooth 初始化要求 width == input_dim"""
        with pytest.raises(ValueError):
            ToyEncoderConfig(init="smooth", input_dim=8, width=16)

    def test_sharpening_switch(self):
        """测试关闭锐化时教师温度等于学生温度"""
        assert DinoConfig(use_sharpening=False).effective_teacher_temp == 0.1
        assert DinoConfig().effective_teacher_temp == 0.04

    def test_run_config_seed_range(self):
        """测试种子必须为 u64"""
        with pytest.raises(ValidationError):
            RunConfig(subcommand="probe", out_dir="out", seed=-1)
        with pytest.raises(ValidationError):
            RunConfig(subcommand="train", out_dir="out")


class TestExceptions:
    """测试异常层次与统一处理装饰器"""

    def test_hierarchy(self):
        """测试退化输入属于 CKA 异常"""
        assert issubclass(DegenerateInputException, CkaException)
        assert issubclass(CkaException, LayerSimException)

    def test_details_in_message(self):
        """测试详细信息拼接到字符串表示"""
        error = ActivationStoreException("数据文件不存在", path="acts/layer_000.f32", layer_id=0)

        assert str(error) == "数据文件不存在 (path=acts/layer_000.f32, layer_id=0)"
        assert error.to_dict()["error_type"] == "ActivationStoreException"

    def test_divergence_keeps_step(self):
        """测试发散异常记录步数"""
        error = TrainingDivergenceException("损失为 NaN", trainer="probe", step=12)
        assert error.step == 12
        assert error.details["trainer"] == "probe"

    def test_handle_exceptions_default_return(self, tmp_path):
        """测试不重新抛出时返回默认值"""
        configure_logger(str(tmp_path / "logs"))

        @handle_exceptions(default_return=-1)
        def failing():
            raise CkaException("失败")

        assert failing() == -1

    def test_handle_exceptions_reraise(self, tmp_path):
        """测试 reraise=True 时原样抛出并写入错误日志"""
        configure_logger(str(tmp_path / "logs"))

        @handle_exceptions(reraise=True)
        def failing():
            raise CkaException("网格失败", details={"cell": "0,1"})

        with pytest.raises(CkaException) as exc_info:
            failing()
        assert "网格失败" in str(exc_info.value)
        assert "网格失败" in (tmp_path / "logs" / "error.log").read_text(encoding="utf-8")


class TestStructuredLogger:
    """测试结构化日志"""

    def test_log_operation_writes_json(self, tmp_path):
        """测试操作日志为 JSON 结构"""
        logger = configure_logger(str(tmp_path / "logs"))
        logger.log_operation("CKA_GRID_START", rows=3, cols=4)

        line = [l for l in (tmp_path / "logs" / "app.log").read_text(encoding="utf-8").splitlines()
                if "OPERATION:" in l][-1]
        payload = json.loads(line.split("OPERATION: ", 1)[1])
        assert payload["operation"] == "CKA_GRID_START"
        assert payload["rows"] == 3

    def test_errors_stay_off_console(self, tmp_path, capsys):
        """测试 log_error 只写文件，不输出到控制台"""
        logger = configure_logger(str(tmp_path / "logs"))
        logger.log_error(ValueError("坏输入"), {"operation": "probe"})

        assert "坏输入" not in capsys.readouterr().err
        assert "坏输入" in (tmp_path / "logs" / "error.log").read_text(encoding="utf-8")

    def test_get_logger_returns_configured_instance(self, tmp_path):
        """测试 get_logger 返回最近一次配置的实例"""
        logger = configure_logger(str(tmp_path / "logs"), console_level="warning")
        assert get_logger() is logger
