from .ArdKernel import ArdKernel, Interval  # noqa isort: skip
from .SparseVariationalGP import SparseVariationalGP  # noqa isort: skip
from .PanelDataset import (  # noqa isort: skip
    IntensitySpec,
    PanelDataset,
    PanelSubject,
    RecurrentDataset,
    RecurrentSubject,
    read_panel_csv,
    read_recurrent_csv,
    simulate_datasets,
    write_panel_csv,
    write_recurrent_csv,
)
from .FitResult import FitConfig, FitResult, StepIntensity  # noqa isort: skip
from .objective import BoundConfig, BoundValue, gp3_elbo, gp4c_bound, gp4c_bound_gradient, mc_elbo  # noqa
from .fit import fit_gp3, fit_gp4c, fit_gp4cw, fit_piecewise_constant, predict_intensity  # noqa
from .evaluate import EvalReport, mise, test_log_likelihood  # noqa
from .funcs import (  # noqa
    DataFormatError,
    DegenerateIntervalError,
    FactorizationError,
    FitDivergedError,
    NegativeVarianceError,
    NumericalError,
    PanelGPError,
)
