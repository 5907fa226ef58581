import json
import os
from dataclasses import dataclass, field

from dotenv import dotenv_values, load_dotenv

from evaluation import EvalConfig
from federation import FederationConfig
from model import LossWeights, ModelConfig
from privacy import DpConfig

load_dotenv()


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 2)."""


class Config:
    # Process-level defaults, overridable from the environment / .env
    DATA_DIR = os.getenv('PRIVREC_DATA_DIR', 'data/ml-1m')
    OUT_DIR = os.getenv('PRIVREC_OUT_DIR', 'runs/latest')
    CACHE_DIR = os.getenv('PRIVREC_CACHE_DIR', '.corpus_cache')
    THREADS = int(os.getenv('PRIVREC_THREADS', '1'))
    SEED = int(os.getenv('PRIVREC_SEED', '0'))
    LOG_LEVEL = os.getenv('PRIVREC_LOG_LEVEL', 'INFO')

    # Published round/client settings per dataset (E1, E2, M)
    DATASET_PRESETS = {
        'movielens': {'E1': 80, 'E2': 100, 'M': 20},
        'frappe': {'E1': 40, 'E2': 100, 'M': 30},
    }


def _ints(text):
    return tuple(int(v) for v in str(text).split(',') if v.strip())


def _floats(text):
    return tuple(float(v) for v in str(text).split(',') if v.strip())


def _bool(text):
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def inner(text):
        return None if str(text).strip() in ('', 'none', 'None') else parse(text)
    return inner


# KEY: (parser, default, description). An empty default means "derived".
CONFIG_KEYS = {
    'DATASET': (str, 'movielens', 'movielens | frappe'),
    'DATA_PATH': (str, Config.DATA_DIR, 'MovieLens directory or Frappe TSV file'),
    'CACHE_DIR': (str, Config.CACHE_DIR, 'normalized corpus cache directory'),
    'SUBSAMPLE_USERS': (int, '0', 'keep this many random users (0 keeps all)'),
    'SESSION_GAP': (_optional(float), '3600', 'max seconds between items of one session'),
    'MAX_SESSION_LEN': (int, '10', 'sessions are chunked to this length'),
    'EMBEDDING_DIM': (int, '64', 'embedding size d'),
    'HIDDEN_DIMS': (_ints, '128,64,32,16', 'hidden layer widths'),
    'HIDDEN_ACTIVATION': (str, 'relu', 'relu | sigmoid'),
    'E1': (_optional(int), '', 'global rounds (dataset preset when empty)'),
    'E2': (_optional(int), '', 'local epochs (dataset preset when empty)'),
    'M': (_optional(int), '', 'clients per round (dataset preset when empty)'),
    'ALPHA1': (float, '0.01', 'local learning rate'),
    'ALPHA2': (float, '1.0', 'server learning rate'),
    'BATCH_SIZE': (int, '32', 'local mini-batch size'),
    'NEGATIVES': (int, '4', 'sampled negatives per positive during training'),
    'SSL_NEGATIVES': (int, '4', 'negative candidates per SSL view'),
    'LAMBDA_IM': (float, '1.0', 'weight of the masked-item loss'),
    'LAMBDA_SM': (float, '1.0', 'weight of the masked-segment loss'),
    'LAMBDA_DSSM': (float, '1.0', 'weight of the supervised loss'),
    'CHECKPOINT_EVERY': (int, '0', 'write a checkpoint every K rounds (0 disables)'),
    'PRETRAIN_E1': (_optional(int), '', 'SSL pretraining rounds (E1 when empty)'),
    'PRETRAIN_E2': (_optional(int), '', 'SSL pretraining local epochs (E2 when empty)'),
    'DP_MODE': (str, 'two-stage', 'one-stage | two-stage'),
    'CLIP_BOUND': (float, '40', 'clipping bound S'),
    'NOISE_SCALE': (float, '1.0', 'noise scale z'),
    'DELTA': (float, '1e-4', 'target delta'),
    'EPSILON': (_optional(float), '', 'target epsilon; calibrates z (Gaussian) or sets the Laplace budget'),
    'MECHANISM': (str, 'gaussian', 'gaussian | laplace'),
    'RDP_BOUND': (str, 'without-replacement', 'without-replacement | poisson'),
    'CHARGING': (str, 'per-client', 'per-client | per-round'),
    'PARAMS': (_optional(str), '', 'parameter file to evaluate (default: OUT_DIR/privrec.params)'),
    'EVAL_K': (_ints, '5,10,20,30', 'cut-offs k'),
    'EVAL_NEGATIVES': (int, '99', 'sampled negatives per test case'),
    'PERSONALIZE': (_bool, 'true', 'fine-tune on each test user before ranking'),
    'INACTIVE_BELOW': (_optional(int), '', 'only evaluate users with fewer interactions'),
    'ACCOUNTANT_N': (int, '4800', 'population size N'),
    'ACCOUNTANT_M': (_ints, '5,10,15,20,25,30', 'clients per round, one row each'),
    'ACCOUNTANT_Z': (float, '1.0', 'noise scale for the table'),
    'ACCOUNTANT_ROUNDS': (int, '1000', 'rounds E1 for the table'),
    'ACCOUNTANT_DELTAS': (_floats, '0,1e-8,1e-6,1e-4', 'one column each'),
    'ATTACK_SHADOW_USERS': (int, '1000', 'shadow population size'),
    'ATTACK_TREES': (int, '50', 'trees in the attack forest'),
    'ATTACK_DEPTH': (int, '8', 'max depth of each tree'),
    'ATTACK_EPSILONS': (_floats, '2,5,15', 'budgets for the DP targets'),
    'GENERATE_USERS': (int, '200', 'users in a generated dataset'),
    'GENERATE_MOVIES': (int, '300', 'movies in a generated dataset'),
    'SEED': (int, str(Config.SEED), 'master seed'),
    'THREADS': (int, str(Config.THREADS), 'client-parallel worker threads'),
    'OUT_DIR': (str, Config.OUT_DIR, 'artifact directory'),
}


def read_config_file(path):
    """Raw KEY=VALUE strings from a dotenv file or the config block of a run manifest."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    if path.endswith('.json'):
        with open(path) as f:
            manifest = json.load(f)
        if 'config' not in manifest:
            raise ConfigError(f"{path} is not a run manifest")
        return {k: str(v) for k, v in manifest['config'].items()}
    return {k: v for k, v in dotenv_values(path).items() if v is not None}


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, path=None, overrides=None):
        raw = {k: default for k, (_, default, _) in CONFIG_KEYS.items()}
        if path:
            raw.update(read_config_file(path))
        raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(raw) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, text in raw.items():
            parse = CONFIG_KEYS[key][0]
            try:
                values[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"{key}={text!r}: {e}") from e
        preset = Config.DATASET_PRESETS.get(values['DATASET'])
        if preset is None:
            raise ConfigError(f"unknown dataset {values['DATASET']!r}")
        for key in ('E1', 'E2', 'M'):
            if values[key] is None:
                values[key] = preset[key]
        return cls(raw, values)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values['SEED']

    @property
    def out_dir(self):
        return self.values['OUT_DIR']

    def snapshot(self):
        """Resolved settings as strings, enough to rebuild this config."""
        snap = dict(self.raw)
        for key in ('E1', 'E2', 'M'):
            snap[key] = str(self.values[key])
        return snap

    def model_config(self):
        return ModelConfig(self['EMBEDDING_DIM'], self['HIDDEN_DIMS'], self['HIDDEN_ACTIVATION'])

    def loss_weights(self):
        return LossWeights(self['LAMBDA_IM'], self['LAMBDA_SM'], self['LAMBDA_DSSM'])

    def federation_config(self, pretrain=False):
        rounds = self['E1']
        epochs = self['E2']
        if pretrain:
            rounds = self['PRETRAIN_E1'] if self['PRETRAIN_E1'] is not None else rounds
            epochs = self['PRETRAIN_E2'] if self['PRETRAIN_E2'] is not None else epochs
        return FederationConfig(
            rounds=rounds,
            local_epochs=epochs,
            clients_per_round=self['M'],
            local_lr=self['ALPHA1'],
            server_lr=self['ALPHA2'],
            batch_size=self['BATCH_SIZE'],
            seed=self.seed,
            negatives=self['NEGATIVES'],
            ssl_negatives=self['SSL_NEGATIVES'],
            weights=self.loss_weights(),
            threads=self['THREADS'],
            checkpoint_every=self['CHECKPOINT_EVERY'],
        )

    def dp_config(self, noise_scale=None, mechanism=None, epsilon=None):
        return DpConfig(
            clip_bound=self['CLIP_BOUND'],
            noise_scale=self['NOISE_SCALE'] if noise_scale is None else noise_scale,
            delta=self['DELTA'],
            mechanism=mechanism or self['MECHANISM'],
            epsilon=self['EPSILON'] if epsilon is None else epsilon,
            bound=self['RDP_BOUND'],
            charging=self['CHARGING'],
        )

    def eval_config(self):
        return EvalConfig(
            k_values=self['EVAL_K'],
            negatives=self['EVAL_NEGATIVES'],
            seed=self.seed,
            personalize=self['PERSONALIZE'],
            inactive_below=self['INACTIVE_BELOW'],
            threads=self['THREADS'],
        )

    def validate(self, needs_data=True):
        try:
            self.model_config().validate()
            self.federation_config().validate()
            self.federation_config(pretrain=True).validate()
            self.dp_config().validate()
            self.eval_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self['DP_MODE'] not in ('one-stage', 'two-stage'):
            raise ConfigError(f"DP_MODE must be one-stage or two-stage, got {self['DP_MODE']!r}")
        if self['SUBSAMPLE_USERS'] < 0 or self['MAX_SESSION_LEN'] < 1:
            raise ConfigError("SUBSAMPLE_USERS must be >= 0 and MAX_SESSION_LEN >= 1")
        if self['ACCOUNTANT_N'] < 1 or any(not 1 <= m <= self['ACCOUNTANT_N'] for m in self['ACCOUNTANT_M']):
            raise ConfigError("accountant grid needs 1 <= M <= N")
        if any(not 0 <= d < 1 for d in self['ACCOUNTANT_DELTAS']):
            raise ConfigError("accountant deltas must lie in [0, 1)")
        if needs_data and not os.path.exists(self['DATA_PATH']):
            raise ConfigError(f"DATA_PATH {self['DATA_PATH']} does not exist")
        return self
