"""Two-agent cooperative Push-T with an orientation constraint."""

from .expert import (
    DemoDataset,
    Episode,
    ExpertConfig,
    expert_action,
    expert_done,
    expert_succeeded,
    gen_dataset,
    read_dataset,
    run_expert,
    write_dataset,
)
from .pusht import (
    AGENTS,
    CON_DIM,
    EGO_DIM,
    LEFT,
    RIGHT,
    EnvConfig,
    Observation,
    PushTState,
    contact_point,
    in_contact,
    metrics,
    mirror_state,
    observe,
    reset,
    step,
    wrap_angle,
)
