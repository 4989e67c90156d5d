"""Online black-box tuning with retrieval-augmented soft prompts.

Public surface: parameter boxes and EMAs, the metric scalarizer, the
prompt memory, the mixture-of-experts surrogate, the tuning agent, the
benchmark environments, the baseline optimizers, the regret-model
verification suite, and the experiment harness.
"""

from .adaptation import AnchorSnapshot, ReplayBuffer, should_escalate
from .baselines import CmaEs, CmaEsAgent, GpModel, GpUcbAgent, RandomSearchAgent, nomem_wrap
from .composer import ErrorComposer, MetricSpec
from .environments import (
    NON_ADVERSARIAL,
    SCENARIO_NAMES,
    EnvState,
    ExperimentDomain,
    make_domain,
    step_env,
)
from .harness import adaptation_speed, measure_latency, measure_memory_growth, paired_t_test, run_cell, run_experiment
from .memory import MemoryEntry, PromptMemory, RetrievalResult
from .params import EPS, ParamBounds, RunningEMA, logistic
from .runconfig import RunConfig, load_run_config
from .surrogate import DenseNet, MoEPrediction, MoESurrogate
from .theory import (
    RegimeSpec,
    RegretTrace,
    chi2_misretrieval_bound,
    contraction_factor,
    misretrieval_run,
    noisy_gradient_run,
    ra_gd_run,
    random_spec,
    regret_bound,
    run_theory_suite,
)
from .tuner import RaspTuner, StepInfo, TunerConfig

__version__ = "0.1.0"
