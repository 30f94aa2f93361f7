"""FDD massive-MIMO link simulator.

Correlated channel models, pilot design, limited feedback quantizers, RZF
precoding with net-rate optimization and a deterministic approximation of
the RZF SINR, together with a seeded Monte Carlo driver.
"""

from .channel_model import (ChannelCovariance, UserGeometry, dominant_representation,
                            iid_ccm, laplacian_ccm, one_ring_ccm, sample_channel)
from .deterministic import DeInput, de_net_rate, de_sinr, solve_fixed_point
from .errors import (ConditioningError, ContractError, ConvergenceError,
                     DegenerateInputError, FddMimoError, InfeasibleScenarioError,
                     InvalidOverheadError, ModelEvaluationError)
from .feedback import (ISO_RVQ, KLSQ, SKEW_RVQ, EstimateBundle, FeedbackScheme,
                       apply_feedback, iso_rvq_feedback, klsq_feedback,
                       optimal_dominant_rank, rwf_allocate, skewed_rvq_feedback,
                       theorem2_bound)
from .figures import FIGURES, reproduce
from .precoding import (OverheadModel, PrecoderConfig, RateReport, feedback_overhead,
                        grid_search, net_rate, rzf_precode, sinr_per_user, sum_rate)
from .scenario import ResultRow, ScenarioConfig, load_config, run_scenario, simulate
from .training import (TrainingDesign, kkt_residual, mmse_estimate, optimize_training,
                       training_error_covariance, unitary_training)

__version__ = "0.1.0"
