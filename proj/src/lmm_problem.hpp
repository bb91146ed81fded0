#pragma once

// Linear mixed model with a stacked D-dimensional response, crossed random
// intercept/slope terms and block-diagonal residual covariance.
//
// Every token i contributes D rows. The residual block Sigma_i = C_i C_i^T is
// whitened away (W_i = C_i^-1) so that, with u = Lambda v and v ~ N(0, I),
//
//   deviance = D n log(2 pi) + sum_i log|Sigma_i| + log|M| + pwrss
//   M        = Lambda^T Z^T R^-1 Z Lambda + I
//
// M is factored by eliminating the term with the most random-effect columns
// first (its diagonal is block-diagonal since each token has one level) and
// densely factoring the Schur complement of the remaining terms.

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmo/design.hpp"
#include "mmo/mixed_model.hpp"

namespace mmo::detail {

enum class SlotKind { log_diag, off_diag, gamma, rho };

struct ParamSlot {
    int block = 0;  // random term index, or n_terms() for the residual
    int row = 0;
    int col = 0;
    SlotKind kind = SlotKind::off_diag;
    std::string name;
};

struct Evaluation {
    double deviance = 0.0;
    double log_det_residual = 0.0;
    double log_det_m = 0.0;
    double pwrss = 0.0;
    Eigen::VectorXd beta;  // vec(beta): index d * p + j
    Eigen::MatrixXd xvx;   // X^T V^-1 X
    Eigen::VectorXd v_hat;
    Eigen::VectorXd gradient;  // empty unless requested
};

class LmmProblem {
public:
    LmmProblem(std::shared_ptr<const DesignMatrices> design, const FitConfig& config);

    int n_params() const { return static_cast<int>(slots_.size()); }
    int dims() const { return dims_; }
    int n_terms() const { return static_cast<int>(terms_.size()); }
    const std::vector<ParamSlot>& slots() const { return slots_; }
    const DesignMatrices& design() const { return *design_; }
    const std::shared_ptr<const DesignMatrices>& design_ptr() const { return design_; }
    const FitConfig& config() const { return config_; }

    Eigen::VectorXd start() const;
    Eigen::VectorXd lower() const;

    Evaluation evaluate(const Eigen::VectorXd& theta, bool with_gradient) const;

    CovarianceParams unpack(const Eigen::VectorXd& theta) const;
    Eigen::VectorXd pack(const CovarianceParams& cov) const;

    // b = Lambda v_hat per term level, keyed by level names.
    RandomEffectEstimates modes(const Eigen::VectorXd& theta, const Eigen::VectorXd& v_hat) const;

private:
    struct Term {
        std::string name;
        int q = 1;        // design columns per formant
        int dim = 1;      // dims_ * q
        int levels = 0;
        const std::vector<int>* level = nullptr;
        Eigen::MatrixXd z;  // n x q
        const std::vector<std::string>* level_names = nullptr;
    };
    struct DenseBlock {
        int term = 0;
        int level = 0;
        int global = 0;   // offset in the dense part
        int compact = 0;  // offset within the eliminated level's compact columns
    };

    std::vector<Eigen::MatrixXd> term_factors(const Eigen::VectorXd& theta) const;
    std::vector<Eigen::MatrixXd> residual_factors(const Eigen::VectorXd& theta,
                                                  Eigen::MatrixXd* sds, double* rho) const;
    int dense_offset(int term, int level) const {
        return dense_off_[static_cast<std::size_t>(term)] + level * terms_[static_cast<std::size_t>(term)].dim;
    }
    int global_offset(int term, int level) const;

    std::shared_ptr<const DesignMatrices> design_;
    FitConfig config_;
    int n_ = 0, p_ = 0, dims_ = 1, m_ = 0;
    bool log_linear_ = false;
    std::vector<Term> terms_;
    std::vector<int> tcol_;       // column offset of each term inside a token's block
    int elim_ = 0;
    std::vector<int> dense_off_;  // -1 for the eliminated term
    int n_dense_ = 0;
    int n_elim_cols_ = 0;
    std::vector<std::vector<DenseBlock>> level_blocks_;  // per eliminated level
    std::vector<int> level_width_;                       // compact column count
    std::vector<int> token_pos_;  // n x n_terms compact offsets (eliminated term unused)
    std::vector<int> vrow_id_;    // residual pattern per token
    Eigen::MatrixXd vrows_;       // distinct variance-design rows
    std::vector<ParamSlot> slots_;
};

}  // namespace mmo::detail
