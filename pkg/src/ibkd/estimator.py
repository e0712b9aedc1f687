"""scikit-learn compatible wrapper around the two-stage trainer."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import StudentModel, TeacherModel
from .exceptions import ConfigError
from .trainer import DistillConfig, SupervisedSet, run_distill_stage, run_finetune_stage


class IBKDEncoder(TransformerMixin, BaseEstimator):
    """Student encoder distilled from teacher embeddings.

    ``fit(X, y)`` runs the distillation stage with ``y`` holding one teacher
    embedding per row of ``X``. Passing ``supervised`` (a ``SupervisedSet``)
    to ``fit`` also runs the fine-tuning stage; ``finetune`` runs it on an
    already fitted encoder. ``transform`` returns the final representation.

    Constructor arguments mirror ``DistillConfig``.
    """

    def __init__(self, hidden_dims=(64,), out_dim=32, tau_distill=0.1, tau_finetune=0.05, beta1=1.0,
                 beta2=0.5, gamma=0.5, kernel=None, lr_distill=1e-4, lr_finetune=3e-5, batch_size=128,
                 epochs_distill=200, epochs_finetune=1600, hard_negatives_K=8, seed=0, reduce_to=None,
                 grad_clip=5.0):
        self.hidden_dims = hidden_dims
        self.out_dim = out_dim
        self.tau_distill = tau_distill
        self.tau_finetune = tau_finetune
        self.beta1 = beta1
        self.beta2 = beta2
        self.gamma = gamma
        self.kernel = kernel
        self.lr_distill = lr_distill
        self.lr_finetune = lr_finetune
        self.batch_size = batch_size
        self.epochs_distill = epochs_distill
        self.epochs_finetune = epochs_finetune
        self.hard_negatives_K = hard_negatives_K
        self.seed = seed
        self.reduce_to = reduce_to
        self.grad_clip = grad_clip

    def get_config(self):
        return DistillConfig(**self.get_params())

    def fit(self, X, y, supervised=None):
        cfg = self.get_config()
        X = check_array(X, dtype=np.float64)
        T = check_array(y, dtype=np.float64)
        if T.shape[0] != X.shape[0]:
            raise ConfigError(f"{X.shape[0]} inputs but {T.shape[0]} teacher embeddings")
        self.n_features_in_ = X.shape[1]
        ids = [str(i) for i in range(X.shape[0])]
        teacher = TeacherModel.from_table(ids, T)
        student = StudentModel.init(cfg.layer_dims(X.shape[1]), seed=cfg.seed)
        self.model_, history = run_distill_stage(cfg, teacher, student, X, ids=ids)
        self.history_ = [history]
        if supervised is not None:
            self._finetune(cfg, supervised)
        return self

    def finetune(self, supervised):
        check_is_fitted(self, "model_")
        self._finetune(self.get_config(), supervised)
        return self

    def _finetune(self, cfg, supervised):
        if not isinstance(supervised, SupervisedSet):
            supervised = SupervisedSet(*supervised)
        self.model_, history = run_finetune_stage(cfg, self.model_, supervised)
        self.history_.append(history)

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} "
                             f"is expecting {self.n_features_in_} features as input")
        return self.model_.embed(X)
