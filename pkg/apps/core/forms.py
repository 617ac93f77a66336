"""
Validation of key=value run configs.

Each form takes the {key: (value, line_no)} mapping from apps.core.config,
casts the values, rejects unknown keys and builds the frozen config
dataclass. Keys that are absent keep the dataclass default. Every error
becomes a ConfigError naming the offending line.
"""
from decouple import Csv
from django import forms

from apps.core.exceptions import ConfigError
from apps.separator.config import Assignment, DecoderLayout, ModelConfig
from apps.synthdata.config import CorpusConfig
from apps.training.config import TrainConfig


class CsvField(forms.Field):
    """Comma-separated list cast element-wise, e.g. `30,50` → (30, 50)."""

    def __init__(self, cast=int, **kwargs):
        self.cast = cast
        kwargs.setdefault('required', False)
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return ()
        try:
            return tuple(Csv(cast=self.cast)(value))
        except (TypeError, ValueError) as exc:
            raise forms.ValidationError(f"expected a comma-separated list of {self.cast.__name__}: {exc}") from exc


def _int(**kwargs):
    return forms.IntegerField(required=False, **kwargs)


def _float(**kwargs):
    return forms.FloatField(required=False, **kwargs)


def _flag():
    return forms.BooleanField(required=False)


class ConfigForm(forms.Form):
    config_class = None

    def __init__(self, entries: dict):
        self.entries = dict(entries)
        super().__init__(data={key: value for key, (value, _) in self.entries.items()})

    def _line(self, key):
        return self.entries.get(key, (None, None))[1]

    def build(self):
        """
        Raises:
          ConfigError: unknown key, uncastable value or violated invariant.
        """
        for key in self.entries:
            if key not in self.fields:
                raise ConfigError(f"unknown key '{key}' for {self.config_class.__name__}", line=self._line(key))
        if not self.is_valid():
            key, errors = next(iter(self.errors.items()))
            raise ConfigError(f"{key}: {' '.join(errors)}", line=self._line(key))
        values = {key: self.cleaned_data[key] for key in self.entries}
        try:
            return self.config_class(**values)
        except ConfigError as exc:
            culprit = next((key for key in values if key in str(exc)), None)
            if culprit is None or exc.line is not None:
                raise
            raise ConfigError(str(exc), line=self._line(culprit)) from exc


class ModelConfigForm(ConfigForm):
    config_class = ModelConfig

    n_queries = _int(min_value=1)
    channels = _int(min_value=1)
    embed_dim = _int(min_value=1)
    heads = _int(min_value=1)
    unet_depth = _int(min_value=1)
    base_channels = _int(min_value=1)
    layout = forms.ChoiceField(choices=DecoderLayout.choices, required=False)
    assignment = forms.ChoiceField(choices=Assignment.choices, required=False)
    freq_bins = _int(min_value=1)
    frames = _int(min_value=1)
    motion_frames = _int(min_value=1)
    mask_hidden = _int(min_value=1)
    ffn_mult = _int(min_value=1)


class TrainConfigForm(ConfigForm):
    config_class = TrainConfig

    epochs = _int(min_value=1)
    batch = _int(min_value=1)
    steps_per_epoch = _int(min_value=1)
    k = _int()
    lr_transformer = _float()
    lr_transformer_milestones = CsvField(cast=int)
    lr_other = _float()
    lr_other_milestones = CsvField(cast=int)
    lr_gamma = _float()
    weight_decay = _float(min_value=0)
    object_jitter = _float(min_value=0)
    contrastive = _flag()
    learnable_projection = _flag()
    adaptive = _flag()
    htl_start = _int(min_value=0)
    htl_ramp = _int(min_value=0)
    htl_lambda = _float(min_value=0)
    temperature = _float()
    val_mixtures = _int(min_value=0)
    exclude_classes = CsvField(cast=int)
    seed = _int()


class CorpusConfigForm(ConfigForm):
    config_class = CorpusConfig

    n_classes = _int(min_value=2)
    clips_per_class = _int(min_value=1)
    seed = _int()
    split_fractions = CsvField(cast=float)
    seconds = _float()


def split_entries(entries: dict, *forms_classes) -> list[dict]:
    """
    Route the keys of one config file to the forms that own them; a key no
    form owns is an error. `seed` goes to every form declaring it.
    """
    routed = [{} for _ in forms_classes]
    for key, entry in entries.items():
        owners = [i for i, form_class in enumerate(forms_classes) if key in form_class.base_fields]
        if not owners:
            raise ConfigError(f"unknown key '{key}'", line=entry[1])
        for i in owners:
            routed[i][key] = entry
    return routed


def build_configs(entries: dict, *forms_classes):
    """One config object per form class, from a single parsed file."""
    return [form_class(part).build() for form_class, part in zip(forms_classes, split_entries(entries, *forms_classes))]
