#include "lmm_problem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mmo/error.hpp"

namespace mmo::detail {
namespace {

constexpr int kMaxDims = 2;
constexpr int kMaxCols = 16;

// Small fixed-capacity matrices keep the per-token loops allocation free.
using RowBlock = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDims, kMaxCols>;
using SquareSmall = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxCols, kMaxCols>;
using DimSquare = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDims, kMaxDims>;
using DimVector = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxDims, 1>;
using XYBlock = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxDims, 2 * kMaxCols + 1>;
using WideSmall = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxCols, 2 * kMaxCols + 1>;

// Cholesky of a PSD matrix; rank-deficient columns are left at zero.
Eigen::MatrixXd psd_cholesky(const Eigen::MatrixXd& a) {
    const Eigen::Index n = a.rows();
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    const double tiny = 1e-300;
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = a(j, j) - l.row(j).head(j).squaredNorm();
        if (d <= tiny) continue;
        l(j, j) = std::sqrt(d);
        for (Eigen::Index i = j + 1; i < n; ++i) {
            l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
        }
    }
    return l;
}

}  // namespace

LmmProblem::LmmProblem(std::shared_ptr<const DesignMatrices> design, const FitConfig& config)
    : design_(std::move(design)), config_(config) {
    const DesignMatrices& d = *design_;
    n_ = d.n();
    p_ = d.p();
    dims_ = d.dims();
    log_linear_ = d.has_variance_model();
    if (dims_ < 1 || dims_ > kMaxDims) throw Error("response must have 1 or 2 columns");
    if (n_ <= p_) throw Error("need more tokens than fixed effects");

    auto add_term = [&](std::string name, const std::vector<int>& level,
                        const std::vector<std::string>& names, Eigen::MatrixXd z) {
        Term t;
        t.name = std::move(name);
        t.q = static_cast<int>(z.cols());
        t.dim = dims_ * t.q;
        t.levels = static_cast<int>(names.size());
        t.level = &level;
        t.level_names = &names;
        t.z = std::move(z);
        terms_.push_back(std::move(t));
    };
    add_term("speaker", d.speaker_index, d.speakers, d.Z_speaker);
    add_term("word", d.word_index, d.words, Eigen::MatrixXd::Ones(n_, 1));
    if (d.has_following()) {
        add_term("following", d.following_index, d.followings, Eigen::MatrixXd::Ones(n_, 1));
    }

    tcol_.resize(terms_.size());
    m_ = 0;
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        tcol_[t] = m_;
        m_ += terms_[t].dim;
    }
    if (m_ > kMaxCols) throw Error("random-effect block per token too wide");
    if (dims_ * p_ + 1 > 2 * kMaxCols + 1) throw Error("too many fixed effects");

    elim_ = 0;
    for (std::size_t t = 1; t < terms_.size(); ++t) {
        if (terms_[t].levels * terms_[t].dim > terms_[elim_].levels * terms_[elim_].dim) {
            elim_ = static_cast<int>(t);
        }
    }
    dense_off_.assign(terms_.size(), -1);
    n_dense_ = 0;
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        if (static_cast<int>(t) == elim_) continue;
        dense_off_[t] = n_dense_;
        n_dense_ += terms_[t].levels * terms_[t].dim;
    }
    const Term& et = terms_[static_cast<std::size_t>(elim_)];
    n_elim_cols_ = et.levels * et.dim;

    // Dense blocks touched by each eliminated level.
    level_blocks_.assign(static_cast<std::size_t>(et.levels), {});
    for (int i = 0; i < n_; ++i) {
        const int l = (*et.level)[static_cast<std::size_t>(i)];
        auto& blocks = level_blocks_[static_cast<std::size_t>(l)];
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            if (static_cast<int>(t) == elim_) continue;
            const int g = (*terms_[t].level)[static_cast<std::size_t>(i)];
            blocks.push_back({static_cast<int>(t), g, dense_offset(static_cast<int>(t), g), 0});
        }
    }
    level_width_.assign(level_blocks_.size(), 0);
    for (std::size_t l = 0; l < level_blocks_.size(); ++l) {
        auto& blocks = level_blocks_[l];
        std::sort(blocks.begin(), blocks.end(),
                  [](const DenseBlock& a, const DenseBlock& b) { return a.global < b.global; });
        blocks.erase(std::unique(blocks.begin(), blocks.end(),
                                 [](const DenseBlock& a, const DenseBlock& b) {
                                     return a.global == b.global;
                                 }),
                     blocks.end());
        int off = 0;
        for (auto& b : blocks) {
            b.compact = off;
            off += terms_[static_cast<std::size_t>(b.term)].dim;
        }
        level_width_[l] = off;
    }
    token_pos_.assign(static_cast<std::size_t>(n_) * terms_.size(), -1);
    for (int i = 0; i < n_; ++i) {
        const auto& blocks = level_blocks_[static_cast<std::size_t>((*et.level)[static_cast<std::size_t>(i)])];
        for (std::size_t t = 0; t < terms_.size(); ++t) {
            if (static_cast<int>(t) == elim_) continue;
            const int g = dense_offset(static_cast<int>(t), (*terms_[t].level)[static_cast<std::size_t>(i)]);
            auto it = std::lower_bound(blocks.begin(), blocks.end(), g,
                                       [](const DenseBlock& b, int key) { return b.global < key; });
            token_pos_[static_cast<std::size_t>(i) * terms_.size() + t] = it->compact;
        }
    }

    // Distinct residual patterns.
    vrow_id_.assign(static_cast<std::size_t>(n_), 0);
    if (log_linear_) {
        std::vector<Eigen::VectorXd> rows;
        for (int i = 0; i < n_; ++i) {
            const Eigen::VectorXd r = d.V.row(i).transpose();
            auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const Eigen::VectorXd& x) { return x == r; });
            if (it == rows.end()) {
                rows.push_back(r);
                vrow_id_[static_cast<std::size_t>(i)] = static_cast<int>(rows.size() - 1);
            } else {
                vrow_id_[static_cast<std::size_t>(i)] = static_cast<int>(it - rows.begin());
            }
        }
        vrows_.resize(static_cast<Eigen::Index>(rows.size()), d.V.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) vrows_.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
    } else {
        vrows_.resize(1, 0);
    }

    // Parameter slots: lower triangles column-major, then the residual.
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        const Term& term = terms_[t];
        for (int c = 0; c < term.dim; ++c) {
            for (int r = c; r < term.dim; ++r) {
                const bool diag = r == c;
                if (!diag && config_.block_diagonal_random && r / term.q != c / term.q) continue;
                slots_.push_back({static_cast<int>(t), r, c,
                                  diag ? SlotKind::log_diag : SlotKind::off_diag,
                                  term.name + ".L[" + std::to_string(r) + "," + std::to_string(c) + "]"});
            }
        }
    }
    const int rb = static_cast<int>(terms_.size());
    const bool correlated = dims_ == 2 && !config_.independent_residual;
    if (!log_linear_) {
        for (int c = 0; c < dims_; ++c) {
            for (int r = c; r < dims_; ++r) {
                if (r != c && !correlated) continue;
                slots_.push_back({rb, r, c, r == c ? SlotKind::log_diag : SlotKind::off_diag,
                                  "residual.L[" + std::to_string(r) + "," + std::to_string(c) + "]"});
            }
        }
    } else {
        const int m = static_cast<int>(d.V.cols());
        for (int c = 0; c < dims_; ++c) {
            for (int j = 0; j < m; ++j) {
                if (config_.variance_intercept_only && j > 0) continue;
                slots_.push_back({rb, j, c, SlotKind::gamma,
                                  "residual.gamma[" + std::to_string(j) + "," + std::to_string(c) + "]"});
            }
        }
        if (correlated) slots_.push_back({rb, 0, 1, SlotKind::rho, "residual.atanh_rho"});
    }
}

int LmmProblem::global_offset(int term, int level) const {
    if (term == elim_) return level * terms_[static_cast<std::size_t>(term)].dim;
    return n_elim_cols_ + dense_offset(term, level);
}

Eigen::VectorXd LmmProblem::start() const {
    Eigen::VectorXd x(n_params());
    for (int k = 0; k < n_params(); ++k) {
        const auto& s = slots_[static_cast<std::size_t>(k)];
        switch (s.kind) {
            case SlotKind::log_diag: x[k] = std::log(0.5); break;
            case SlotKind::gamma: x[k] = s.row == 0 ? std::log(0.5) : 0.0; break;
            default: x[k] = 0.0;
        }
    }
    return x;
}

Eigen::VectorXd LmmProblem::lower() const {
    Eigen::VectorXd lb(n_params());
    for (int k = 0; k < n_params(); ++k) {
        const auto& s = slots_[static_cast<std::size_t>(k)];
        const bool log_sd = s.kind == SlotKind::log_diag || (s.kind == SlotKind::gamma && s.row == 0);
        lb[k] = log_sd ? config_.log_sd_floor : -std::numeric_limits<double>::infinity();
    }
    return lb;
}

std::vector<Eigen::MatrixXd> LmmProblem::term_factors(const Eigen::VectorXd& theta) const {
    std::vector<Eigen::MatrixXd> out;
    out.reserve(terms_.size());
    for (const auto& t : terms_) out.push_back(Eigen::MatrixXd::Zero(t.dim, t.dim));
    for (int k = 0; k < n_params(); ++k) {
        const auto& s = slots_[static_cast<std::size_t>(k)];
        if (s.block >= n_terms()) continue;
        out[static_cast<std::size_t>(s.block)](s.row, s.col) =
            s.kind == SlotKind::log_diag ? std::exp(theta[k]) : theta[k];
    }
    return out;
}

std::vector<Eigen::MatrixXd> LmmProblem::residual_factors(const Eigen::VectorXd& theta,
                                                          Eigen::MatrixXd* sds,
                                                          double* rho_out) const {
    const int rb = n_terms();
    std::vector<Eigen::MatrixXd> chol;
    if (!log_linear_) {
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(dims_, dims_);
        for (int k = 0; k < n_params(); ++k) {
            const auto& s = slots_[static_cast<std::size_t>(k)];
            if (s.block != rb) continue;
            c(s.row, s.col) = s.kind == SlotKind::log_diag ? std::exp(theta[k]) : theta[k];
        }
        chol.push_back(std::move(c));
        return chol;
    }
    Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(vrows_.cols(), dims_);
    double rho = 0.0;
    for (int k = 0; k < n_params(); ++k) {
        const auto& s = slots_[static_cast<std::size_t>(k)];
        if (s.block != rb) continue;
        if (s.kind == SlotKind::gamma) gamma(s.row, s.col) = theta[k];
        if (s.kind == SlotKind::rho) rho = std::tanh(theta[k]);
    }
    Eigen::MatrixXd sd(vrows_.rows(), dims_);
    for (Eigen::Index r = 0; r < vrows_.rows(); ++r) {
        for (int c = 0; c < dims_; ++c) sd(r, c) = std::exp(vrows_.row(r).dot(gamma.col(c)));
        Eigen::MatrixXd l = Eigen::MatrixXd::Zero(dims_, dims_);
        l(0, 0) = sd(r, 0);
        if (dims_ == 2) {
            l(1, 0) = rho * sd(r, 1);
            l(1, 1) = sd(r, 1) * std::sqrt(1.0 - rho * rho);
        }
        chol.push_back(std::move(l));
    }
    if (sds) *sds = sd;
    if (rho_out) *rho_out = rho;
    return chol;
}

Evaluation LmmProblem::evaluate(const Eigen::VectorXd& theta, bool with_gradient) const {
    if (theta.size() != n_params()) throw Error("theta has the wrong length");
    const DesignMatrices& d = *design_;
    const int D = dims_;
    const int Dp = D * p_;
    const int nT = n_terms();
    const Term& et = terms_[static_cast<std::size_t>(elim_)];
    const int de = et.dim;
    const int n_levels = et.levels;

    const std::vector<Eigen::MatrixXd> T = term_factors(theta);
    Eigen::MatrixXd sds;
    double rho = 0.0;
    const std::vector<Eigen::MatrixXd> C = residual_factors(theta, &sds, &rho);

    // Whitening per residual pattern.
    std::vector<DimSquare> W(C.size());
    double log_det_r = 0.0;
    std::vector<double> pattern_logdet(C.size());
    for (std::size_t k = 0; k < C.size(); ++k) {
        const DimSquare ck = C[k];
        if ((ck.diagonal().array() <= 0.0).any()) throw SingularSystem("residual covariance is singular");
        W[k] = ck.triangularView<Eigen::Lower>().solve(DimSquare::Identity(D, D));
        pattern_logdet[k] = 2.0 * ck.diagonal().array().log().sum();
    }

    // Whitened per-token rows.
    Eigen::MatrixXd A(static_cast<Eigen::Index>(n_) * D, m_);
    Eigen::MatrixXd XY(static_cast<Eigen::Index>(n_) * D, Dp + 1);
    for (int i = 0; i < n_; ++i) {
        const std::size_t ui = static_cast<std::size_t>(i);
        const int k = vrow_id_[ui];
        const DimSquare& w = W[static_cast<std::size_t>(k)];
        log_det_r += pattern_logdet[static_cast<std::size_t>(k)];
        auto Ai = A.middleRows(static_cast<Eigen::Index>(i) * D, D);
        for (int t = 0; t < nT; ++t) {
            const Term& term = terms_[static_cast<std::size_t>(t)];
            RowBlock zt(D, term.dim);
            for (int r = 0; r < D; ++r) {
                zt.row(r).noalias() =
                    term.z.row(i) * T[static_cast<std::size_t>(t)].middleRows(r * term.q, term.q);
            }
            Ai.middleCols(tcol_[static_cast<std::size_t>(t)], term.dim).noalias() = w * zt;
        }
        auto XYi = XY.middleRows(static_cast<Eigen::Index>(i) * D, D);
        for (int r = 0; r < D; ++r) {
            XYi.middleCols(r * p_, p_).noalias() = w.col(r) * d.X.row(i);
        }
        XYi.col(Dp).noalias() = w * d.Y.row(i).transpose();
        (void)ui;
    }

    // Accumulate M = A^T A + I (eliminated / dense split) and right-hand sides.
    std::vector<Eigen::MatrixXd> Ae_blk(static_cast<std::size_t>(n_levels), Eigen::MatrixXd::Zero(de, de));
    std::vector<Eigen::MatrixXd> B(static_cast<std::size_t>(n_levels));
    std::vector<Eigen::MatrixXd> rhs_e(static_cast<std::size_t>(n_levels), Eigen::MatrixXd::Zero(de, Dp + 1));
    for (int l = 0; l < n_levels; ++l) B[static_cast<std::size_t>(l)] = Eigen::MatrixXd::Zero(de, level_width_[static_cast<std::size_t>(l)]);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(n_dense_, n_dense_);
    Eigen::MatrixXd rhs_d = Eigen::MatrixXd::Zero(n_dense_, Dp + 1);
    Eigen::MatrixXd QQ = XY.transpose() * XY;

    const int ecol = tcol_[static_cast<std::size_t>(elim_)];
    RowBlock a(D, m_);
    XYBlock xy(D, Dp + 1);
    SquareSmall ata(m_, m_);
    WideSmall aty(m_, Dp + 1);
    for (int i = 0; i < n_; ++i) {
        const std::size_t ui = static_cast<std::size_t>(i);
        const std::size_t l = static_cast<std::size_t>((*et.level)[ui]);
        a = A.middleRows(static_cast<Eigen::Index>(i) * D, D);
        xy = XY.middleRows(static_cast<Eigen::Index>(i) * D, D);
        ata.noalias() = a.transpose().lazyProduct(a);
        aty.noalias() = a.transpose().lazyProduct(xy);
        Ae_blk[l] += ata.block(ecol, ecol, de, de);
        rhs_e[l] += aty.middleRows(ecol, de);
        for (int t = 0; t < nT; ++t) {
            if (t == elim_) continue;
            const Term& term = terms_[static_cast<std::size_t>(t)];
            const int c1 = tcol_[static_cast<std::size_t>(t)];
            const int pos = token_pos_[ui * static_cast<std::size_t>(nT) + static_cast<std::size_t>(t)];
            const int go = dense_offset(t, (*term.level)[ui]);
            B[l].middleCols(pos, term.dim) += ata.block(ecol, c1, de, term.dim);
            rhs_d.middleRows(go, term.dim) += aty.middleRows(c1, term.dim);
            for (int t2 = 0; t2 < nT; ++t2) {
                if (t2 == elim_) continue;
                const Term& term2 = terms_[static_cast<std::size_t>(t2)];
                const int go2 = dense_offset(t2, (*term2.level)[ui]);
                S.block(go, go2, term.dim, term2.dim) += ata.block(c1, tcol_[static_cast<std::size_t>(t2)], term.dim, term2.dim);
            }
        }
    }
    S.diagonal().array() += 1.0;

    // Eliminate the block-diagonal term.
    double log_det_m = 0.0;
    std::vector<Eigen::MatrixXd> Ainv(static_cast<std::size_t>(n_levels));
    std::vector<Eigen::MatrixXd> K(static_cast<std::size_t>(n_levels));
    Eigen::MatrixXd rhs_red = rhs_d;
    for (int l = 0; l < n_levels; ++l) {
        const std::size_t ul = static_cast<std::size_t>(l);
        Eigen::MatrixXd al = Ae_blk[ul];
        al.diagonal().array() += 1.0;
        Eigen::LLT<Eigen::MatrixXd> llt(al);
        if (llt.info() != Eigen::Success) {
            throw SingularSystem("random-effect block of " + et.name + " '" +
                                 (*et.level_names)[ul] + "' is not positive definite");
        }
        log_det_m += 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
        Ainv[ul] = llt.solve(Eigen::MatrixXd::Identity(de, de));
        K[ul] = Ainv[ul] * B[ul];
        const Eigen::MatrixXd BtK = B[ul].transpose() * K[ul];
        const Eigen::MatrixXd KtR = K[ul].transpose() * rhs_e[ul];
        const auto& blocks = level_blocks_[ul];
        for (const auto& b1 : blocks) {
            const int d1 = terms_[static_cast<std::size_t>(b1.term)].dim;
            rhs_red.middleRows(b1.global, d1) -= KtR.middleRows(b1.compact, d1);
            for (const auto& b2 : blocks) {
                const int d2 = terms_[static_cast<std::size_t>(b2.term)].dim;
                S.block(b1.global, b2.global, d1, d2) -= BtK.block(b1.compact, b2.compact, d1, d2);
            }
        }
    }
    Eigen::LLT<Eigen::MatrixXd> llt_s(S);
    if (llt_s.info() != Eigen::Success) {
        throw SingularSystem("dense random-effect block (Schur complement) is not positive definite");
    }
    log_det_m += 2.0 * llt_s.matrixLLT().diagonal().array().log().sum();

    const Eigen::MatrixXd xd = llt_s.solve(rhs_red);
    Eigen::MatrixXd Q = QQ - rhs_d.transpose() * xd;
    for (int l = 0; l < n_levels; ++l) {
        const std::size_t ul = static_cast<std::size_t>(l);
        Eigen::MatrixXd gathered(level_width_[ul], Dp + 1);
        for (const auto& b : level_blocks_[ul]) {
            const int dim = terms_[static_cast<std::size_t>(b.term)].dim;
            gathered.middleRows(b.compact, dim) = xd.middleRows(b.global, dim);
        }
        const Eigen::MatrixXd xe = Ainv[ul] * (rhs_e[ul] - B[ul] * gathered);
        Q.noalias() -= rhs_e[ul].transpose() * xe;
    }

    // Solves M v = A^T r for a whitened residual r (stacked per token).
    auto solve_modes = [&](const Eigen::VectorXd& r) {
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_elim_cols_ + n_dense_);
        for (int i = 0; i < n_; ++i) {
            const std::size_t ui = static_cast<std::size_t>(i);
            const auto Ai = A.middleRows(static_cast<Eigen::Index>(i) * D, D);
            const auto ri = r.segment(static_cast<Eigen::Index>(i) * D, D);
            for (int t = 0; t < nT; ++t) {
                const Term& term = terms_[static_cast<std::size_t>(t)];
                rhs.segment(global_offset(t, (*term.level)[ui]), term.dim).noalias() +=
                    Ai.middleCols(tcol_[static_cast<std::size_t>(t)], term.dim).transpose() * ri;
            }
        }
        Eigen::VectorXd red = rhs.tail(n_dense_);
        for (int l = 0; l < n_levels; ++l) {
            const std::size_t ul = static_cast<std::size_t>(l);
            const Eigen::VectorXd kr = K[ul].transpose() * rhs.segment(l * de, de);
            for (const auto& b : level_blocks_[ul]) {
                const int dim = terms_[static_cast<std::size_t>(b.term)].dim;
                red.segment(b.global, dim) -= kr.segment(b.compact, dim);
            }
        }
        Eigen::VectorXd v(n_elim_cols_ + n_dense_);
        v.tail(n_dense_) = llt_s.solve(red);
        for (int l = 0; l < n_levels; ++l) {
            const std::size_t ul = static_cast<std::size_t>(l);
            Eigen::VectorXd gathered(level_width_[ul]);
            for (const auto& b : level_blocks_[ul]) {
                const int dim = terms_[static_cast<std::size_t>(b.term)].dim;
                gathered.segment(b.compact, dim) = v.segment(n_elim_cols_ + b.global, dim);
            }
            v.segment(l * de, de) = Ainv[ul] * (rhs.segment(l * de, de) - B[ul] * gathered);
        }
        return v;
    };
    // Whitened residual after removing fixed and random parts.
    auto residual = [&](const Eigen::VectorXd& beta, const Eigen::VectorXd* v) {
        Eigen::VectorXd r(static_cast<Eigen::Index>(n_) * D);
        for (int i = 0; i < n_; ++i) {
            const std::size_t ui = static_cast<std::size_t>(i);
            const auto XYi = XY.middleRows(static_cast<Eigen::Index>(i) * D, D);
            DimVector ri = XYi.col(Dp) - XYi.leftCols(Dp) * beta;
            if (v) {
                const auto Ai = A.middleRows(static_cast<Eigen::Index>(i) * D, D);
                for (int t = 0; t < nT; ++t) {
                    const Term& term = terms_[static_cast<std::size_t>(t)];
                    ri.noalias() -= Ai.middleCols(tcol_[static_cast<std::size_t>(t)], term.dim) *
                                    v->segment(global_offset(t, (*term.level)[ui]), term.dim);
                }
            }
            r.segment(static_cast<Eigen::Index>(i) * D, D) = ri;
        }
        return r;
    };

    Evaluation ev;
    ev.xvx = Q.topLeftCorner(Dp, Dp);
    ev.xvx = 0.5 * (ev.xvx + ev.xvx.transpose()).eval();
    Eigen::LLT<Eigen::MatrixXd> llt_x(ev.xvx);
    if (llt_x.info() != Eigen::Success) throw SingularSystem("fixed-effect cross-product is singular");
    ev.beta = llt_x.solve(Q.topRightCorner(Dp, 1));

    // The Schur-complement route loses digits when random effects dwarf the
    // residual; refine beta against X^T V^-1 (y - X beta) computed from the
    // residuals directly.
    Eigen::VectorXd r0 = residual(ev.beta, nullptr);
    ev.v_hat = solve_modes(r0);
    for (int sweep = 0; sweep < 2; ++sweep) {
        const Eigen::VectorXd rr = residual(ev.beta, &ev.v_hat);
        Eigen::VectorXd g = XY.leftCols(Dp).transpose() * rr;
        ev.beta += llt_x.solve(g);
        ev.v_hat = solve_modes(residual(ev.beta, nullptr));
    }

    // Penalized residual sum of squares from the residuals themselves; the
    // normal-equation shortcut cancels badly when the fit is nearly exact.
    ev.pwrss = ev.v_hat.squaredNorm() + residual(ev.beta, &ev.v_hat).squaredNorm();
    ev.log_det_m = log_det_m;
    ev.log_det_residual = log_det_r;
    ev.deviance = static_cast<double>(D) * n_ * std::log(2.0 * std::numbers::pi) + log_det_r + log_det_m + ev.pwrss;

    if (!with_gradient) return ev;

    // Gradient: d dev / d theta_k = tr(P V_k) - e^T V_k e with P = V^-1 and
    // e = P (y - X beta_hat). Only the blocks of M^-1 that tokens touch are formed.
    const Eigen::MatrixXd Sinv = llt_s.solve(Eigen::MatrixXd::Identity(n_dense_, n_dense_));
    std::vector<Eigen::MatrixXd> Y(static_cast<std::size_t>(n_levels));
    std::vector<Eigen::MatrixXd> Mee(static_cast<std::size_t>(n_levels));
    for (int l = 0; l < n_levels; ++l) {
        const std::size_t ul = static_cast<std::size_t>(l);
        const auto& blocks = level_blocks_[ul];
        Eigen::MatrixXd sub(level_width_[ul], level_width_[ul]);
        for (const auto& b1 : blocks) {
            const int d1 = terms_[static_cast<std::size_t>(b1.term)].dim;
            for (const auto& b2 : blocks) {
                const int d2 = terms_[static_cast<std::size_t>(b2.term)].dim;
                sub.block(b1.compact, b2.compact, d1, d2) = Sinv.block(b1.global, b2.global, d1, d2);
            }
        }
        Y[ul] = -K[ul] * sub;
        Mee[ul] = Ainv[ul] - Y[ul] * K[ul].transpose();
    }

    std::vector<Eigen::MatrixXd> gT;
    std::vector<Eigen::MatrixXd> u;
    for (const auto& term : terms_) {
        gT.push_back(Eigen::MatrixXd::Zero(term.dim, term.dim));
        u.push_back(Eigen::MatrixXd::Zero(term.dim, term.levels));
    }
    std::vector<Eigen::MatrixXd> E_pattern(C.size(), Eigen::MatrixXd::Zero(D, D));

    SquareSmall minv(m_, m_);
    for (int i = 0; i < n_; ++i) {
        const std::size_t ui = static_cast<std::size_t>(i);
        const int l = (*et.level)[ui];
        const std::size_t ul = static_cast<std::size_t>(l);
        const int k = vrow_id_[ui];
        const DimSquare& w = W[static_cast<std::size_t>(k)];
        const auto Ai = A.middleRows(static_cast<Eigen::Index>(i) * D, D);
        const auto XYi = XY.middleRows(static_cast<Eigen::Index>(i) * D, D);

        // M^-1 restricted to this token's columns.
        for (int t1 = 0; t1 < nT; ++t1) {
            const Term& a = terms_[static_cast<std::size_t>(t1)];
            const int c1 = tcol_[static_cast<std::size_t>(t1)];
            const int pos1 = t1 == elim_ ? -1 : token_pos_[ui * static_cast<std::size_t>(nT) + static_cast<std::size_t>(t1)];
            for (int t2 = 0; t2 < nT; ++t2) {
                const Term& b = terms_[static_cast<std::size_t>(t2)];
                const int c2 = tcol_[static_cast<std::size_t>(t2)];
                const int pos2 = t2 == elim_ ? -1 : token_pos_[ui * static_cast<std::size_t>(nT) + static_cast<std::size_t>(t2)];
                if (t1 == elim_ && t2 == elim_) {
                    minv.block(c1, c2, a.dim, b.dim) = Mee[ul];
                } else if (t1 == elim_) {
                    minv.block(c1, c2, a.dim, b.dim) = Y[ul].middleCols(pos2, b.dim);
                } else if (t2 == elim_) {
                    minv.block(c1, c2, a.dim, b.dim) = Y[ul].middleCols(pos1, a.dim).transpose();
                } else {
                    minv.block(c1, c2, a.dim, b.dim) =
                        Sinv.block(dense_offset(t1, (*a.level)[ui]), dense_offset(t2, (*b.level)[ui]), a.dim, b.dim);
                }
            }
        }
        const RowBlock ai = Ai;
        RowBlock H(D, m_);
        H.noalias() = ai.lazyProduct(minv);

        DimVector resid = XYi.col(Dp) - XYi.leftCols(Dp) * ev.beta;
        for (int t = 0; t < nT; ++t) {
            const Term& term = terms_[static_cast<std::size_t>(t)];
            const int go = global_offset(t, (*term.level)[ui]);
            resid.noalias() -= ai.middleCols(tcol_[static_cast<std::size_t>(t)], term.dim).lazyProduct(ev.v_hat.segment(go, term.dim));
        }
        const DimVector e = w.transpose() * resid;

        DimSquare inner = DimSquare::Identity(D, D);
        inner.noalias() -= H.lazyProduct(ai.transpose());
        const DimSquare P = w.transpose() * inner * w;
        E_pattern[static_cast<std::size_t>(k)].noalias() += P - e * e.transpose();

        for (int t = 0; t < nT; ++t) {
            const Term& term = terms_[static_cast<std::size_t>(t)];
            RowBlock bz(D, term.dim);
            for (int r = 0; r < D; ++r) {
                for (int j = 0; j < term.q; ++j) bz.col(r * term.q + j) = w.col(r) * term.z(i, j);
            }
            gT[static_cast<std::size_t>(t)].noalias() +=
                bz.transpose().lazyProduct(H.middleCols(tcol_[static_cast<std::size_t>(t)], term.dim));
            auto ucol = u[static_cast<std::size_t>(t)].col((*term.level)[ui]);
            for (int r = 0; r < D; ++r) {
                for (int j = 0; j < term.q; ++j) ucol[r * term.q + j] += term.z(i, j) * e[r];
            }
        }
    }

    for (int t = 0; t < nT; ++t) {
        const std::size_t ut = static_cast<std::size_t>(t);
        // sum over levels of u (T^T u)^T = U U^T T
        gT[ut].noalias() -= u[ut] * (u[ut].transpose() * T[ut]);
        gT[ut] *= 2.0;
    }

    ev.gradient.resize(n_params());
    const int rb = nT;
    Eigen::MatrixXd gC;
    if (!log_linear_) {
        Eigen::MatrixXd SR = Eigen::MatrixXd::Zero(D, D);
        for (const auto& e : E_pattern) SR += e;
        gC = 2.0 * SR * C[0];
    }
    for (int kk = 0; kk < n_params(); ++kk) {
        const auto& s = slots_[static_cast<std::size_t>(kk)];
        if (s.block < rb) {
            const double g = gT[static_cast<std::size_t>(s.block)](s.row, s.col);
            ev.gradient[kk] = s.kind == SlotKind::log_diag ? g * std::exp(theta[kk]) : g;
        } else if (!log_linear_) {
            const double g = gC(s.row, s.col);
            ev.gradient[kk] = s.kind == SlotKind::log_diag ? g * C[0](s.row, s.row) : g;
        } else if (s.kind == SlotKind::gamma) {
            double g = 0.0;
            for (std::size_t pk = 0; pk < E_pattern.size(); ++pk) {
                const Eigen::MatrixXd& E = E_pattern[pk];
                const int dd = s.col;
                double edk = 0.0;  // (E diag(s) K)_{dd}
                for (int c = 0; c < D; ++c) {
                    const double corr = c == dd ? 1.0 : rho;
                    edk += E(dd, c) * sds(static_cast<Eigen::Index>(pk), c) * corr;
                }
                g += 2.0 * edk * sds(static_cast<Eigen::Index>(pk), dd) * vrows_(static_cast<Eigen::Index>(pk), s.row);
            }
            ev.gradient[kk] = g;
        } else {  // rho
            double g = 0.0;
            for (std::size_t pk = 0; pk < E_pattern.size(); ++pk) {
                g += 2.0 * E_pattern[pk](0, 1) * sds(static_cast<Eigen::Index>(pk), 0) * sds(static_cast<Eigen::Index>(pk), 1);
            }
            ev.gradient[kk] = g * (1.0 - rho * rho);
        }
    }
    return ev;
}

CovarianceParams LmmProblem::unpack(const Eigen::VectorXd& theta) const {
    CovarianceParams out;
    const auto T = term_factors(theta);
    out.G_speaker = T[0] * T[0].transpose();
    out.G_word = T[1] * T[1].transpose();
    if (terms_.size() > 2) out.G_following = T[2] * T[2].transpose();
    const int rb = n_terms();
    out.residual.log_linear = log_linear_;
    if (!log_linear_) {
        const auto C = residual_factors(theta, nullptr, nullptr);
        out.residual.Sigma = C[0] * C[0].transpose();
    } else {
        out.residual.gamma = Eigen::MatrixXd::Zero(vrows_.cols(), dims_);
        for (int k = 0; k < n_params(); ++k) {
            const auto& s = slots_[static_cast<std::size_t>(k)];
            if (s.block != rb) continue;
            if (s.kind == SlotKind::gamma) out.residual.gamma(s.row, s.col) = theta[k];
            if (s.kind == SlotKind::rho) out.residual.rho = std::tanh(theta[k]);
        }
    }
    return out;
}

Eigen::VectorXd LmmProblem::pack(const CovarianceParams& cov) const {
    std::vector<Eigen::MatrixXd> L;
    L.push_back(psd_cholesky(cov.G_speaker));
    L.push_back(psd_cholesky(cov.G_word));
    if (terms_.size() > 2) {
        if (!cov.G_following) throw Error("covariances lack the following-segment term");
        L.push_back(psd_cholesky(*cov.G_following));
    }
    for (std::size_t t = 0; t < terms_.size(); ++t) {
        if (L[t].rows() != terms_[t].dim) throw Error("covariance of term " + terms_[t].name + " has the wrong size");
    }
    Eigen::MatrixXd rc;
    if (!log_linear_) rc = psd_cholesky(cov.residual.Sigma);

    Eigen::VectorXd theta(n_params());
    const int rb = n_terms();
    for (int k = 0; k < n_params(); ++k) {
        const auto& s = slots_[static_cast<std::size_t>(k)];
        double v = 0.0;
        if (s.block < rb) {
            v = L[static_cast<std::size_t>(s.block)](s.row, s.col);
        } else if (!log_linear_) {
            v = rc(s.row, s.col);
        } else if (s.kind == SlotKind::gamma) {
            v = cov.residual.gamma(s.row, s.col);
        } else {
            v = std::atanh(cov.residual.rho);
        }
        if (s.kind == SlotKind::log_diag) v = v > 0.0 ? std::max(std::log(v), config_.log_sd_floor) : config_.log_sd_floor;
        theta[k] = v;
    }
    return theta;
}

RandomEffectEstimates LmmProblem::modes(const Eigen::VectorXd& theta, const Eigen::VectorXd& v_hat) const {
    const auto T = term_factors(theta);
    RandomEffectEstimates out;
    for (int t = 0; t < n_terms(); ++t) {
        const Term& term = terms_[static_cast<std::size_t>(t)];
        auto& target = t == 0 ? out.speaker : (t == 1 ? out.word : out.following);
        for (int g = 0; g < term.levels; ++g) {
            target[(*term.level_names)[static_cast<std::size_t>(g)]] =
                T[static_cast<std::size_t>(t)] * v_hat.segment(global_offset(t, g), term.dim);
        }
    }
    return out;
}

}  // namespace mmo::detail
