#pragma once
// Exact second-moment analytics for the affine Gaussian dynamics
//   X_v(k+1) = a X_v(k) + b * sum_{u in N(v)} X_u(k) + c + xi_v(k+1)
// on infinite regular and almost-regular trees, with independent standard
// Gaussian initial states and noises. Covariance blocks are indexed by
// vertex distance and advanced one horizon at a time; everything two or more
// generations below the tracked vertices enters through Gaussian regression
// onto a (parent, grandparent) trajectory pair. Near-singular conditioning
// blocks abort with diagnostics; nothing is regularized.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace pca {

using dmat = Eigen::MatrixXd;
using dvec = Eigen::VectorXd;

// Thrown when a conditioning or Schur block is numerically singular.
struct singular_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string fmt_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

// Smallest-eigenvalue gate shared by every conditioning step: below 1e-10
// the block is treated as singular and the caller must not proceed.
inline void require_invertible(const dmat& s, const char* what) {
  Eigen::SelfAdjointEigenSolver<dmat> es(s, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues()(0);
  const double hi = es.eigenvalues()(es.eigenvalues().size() - 1);
  if (!(lo >= 1e-10)) {
    throw singular_error(std::string(what) + " near singular: size " +
                         std::to_string(s.rows()) + ", min eigenvalue " +
                         fmt_g17(lo) + ", condition estimate " +
                         fmt_g17(lo > 0 ? hi / lo : std::nan("")));
  }
}

inline dmat hcat(const dmat& l, const dmat& r) {
  dmat out(l.rows(), l.cols() + r.cols());
  out << l, r;
  return out;
}

inline dmat vcat(const dmat& t, const dmat& b) {
  dmat out(t.rows() + b.rows(), t.cols());
  out << t, b;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// First moments. The recursion is authoritative; the closed form
// c((a+kb)^k - 1)/(a+kb-1) breaks down at a+kb = 1 and is test-only.
inline std::vector<double> mean_sequence(double a, double b, double c,
                                         int kappa, int k) {
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (kappa < 0) throw std::invalid_argument("negative branching degree");
  std::vector<double> m(static_cast<std::size_t>(k) + 1, 0.0);
  for (int t = 0; t < k; ++t)
    m[std::size_t(t) + 1] = (a + kappa * b) * m[std::size_t(t)] + c;
  return m;
}

// ---------------------------------------------------------------------------
// A finite Gaussian vector with named coordinates.
struct gaussian_joint {
  dvec mean;
  dmat cov;
  std::vector<std::string> labels;  // empty or one per coordinate
};

// Shape, symmetry, and near-PSD audit (eigenvalues >= -eig_tol).
inline void check_joint(const gaussian_joint& j, double eig_tol = 1e-10) {
  const auto d = j.cov.rows();
  if (j.cov.cols() != d) throw std::invalid_argument("covariance not square");
  if (j.mean.size() != d) throw std::invalid_argument("mean size mismatch");
  if (!j.labels.empty() && j.labels.size() != std::size_t(d))
    throw std::invalid_argument("label count mismatch");
  const double scale = d > 0 ? j.cov.cwiseAbs().maxCoeff() : 0.0;
  if (d > 0 && (j.cov - j.cov.transpose()).cwiseAbs().maxCoeff() >
                   1e-12 * (1.0 + scale))
    throw std::invalid_argument("covariance not symmetric");
  if (d > 0) {
    Eigen::SelfAdjointEigenSolver<dmat> es(j.cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues()(0) < -eig_tol)
      throw std::invalid_argument("covariance not positive semidefinite: min eigenvalue " +
                                  detail::fmt_g17(es.eigenvalues()(0)));
  }
}

// Law of the kept coordinates given observed values of the conditioning
// coordinates, by Schur complement on the conditioning block.
inline gaussian_joint conditional_gaussian(const gaussian_joint& joint,
                                           std::span<const int> keep,
                                           std::span<const int> given,
                                           std::span<const double> values) {
  const auto d = joint.cov.rows();
  if (joint.mean.size() != d) throw std::invalid_argument("mean size mismatch");
  if (values.size() != given.size())
    throw std::invalid_argument("one value per conditioning coordinate");
  std::vector<char> used(static_cast<std::size_t>(d), 0);
  auto take = [&](int i) {
    if (i < 0 || i >= d) throw std::invalid_argument("index out of range");
    if (used[std::size_t(i)]) throw std::invalid_argument("duplicate index");
    used[std::size_t(i)] = 1;
  };
  for (int i : keep) take(i);
  for (int i : given) take(i);

  const auto nk = Eigen::Index(keep.size());
  const auto ng = Eigen::Index(given.size());
  dmat skk(nk, nk), skg(nk, ng), sgg(ng, ng);
  dvec mk(nk), mg(ng), val(ng);
  for (Eigen::Index i = 0; i < nk; ++i) {
    mk(i) = joint.mean(keep[std::size_t(i)]);
    for (Eigen::Index j = 0; j < nk; ++j)
      skk(i, j) = joint.cov(keep[std::size_t(i)], keep[std::size_t(j)]);
    for (Eigen::Index j = 0; j < ng; ++j)
      skg(i, j) = joint.cov(keep[std::size_t(i)], given[std::size_t(j)]);
  }
  for (Eigen::Index i = 0; i < ng; ++i) {
    mg(i) = joint.mean(given[std::size_t(i)]);
    val(i) = values[std::size_t(i)];
    for (Eigen::Index j = 0; j < ng; ++j)
      sgg(i, j) = joint.cov(given[std::size_t(i)], given[std::size_t(j)]);
  }

  gaussian_joint out;
  if (ng == 0) {
    out.mean = mk;
    out.cov = skk;
  } else {
    detail::require_invertible(sgg, "conditioning block");
    Eigen::LDLT<dmat> ld(sgg);
    const dmat w = ld.solve(skg.transpose());  // ng x nk
    dmat cc = skk - skg * w;
    out.cov = 0.5 * (cc + cc.transpose());
    out.mean = mk + skg * ld.solve(val - mg);
  }
  if (!joint.labels.empty()) {
    out.labels.reserve(std::size_t(nk));
    for (int i : keep) out.labels.push_back(joint.labels[std::size_t(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Index maps between the two layouts of the tracked-pair trajectory
// covariance: blocked (X_u(0..k), X_v(0..k)) and interleaved
// (X_u(0), X_v(0), ..., X_u(k), X_v(k)). Each returns, for every index of
// its own layout, the position in the other layout.
inline std::vector<int> interleaved_positions(int k) {
  const int n = k + 1;
  std::vector<int> pos(static_cast<std::size_t>(2 * n));
  for (int i = 0; i < 2 * n; ++i)
    pos[std::size_t(i)] = 2 * (i % n) + (i / n);
  return pos;
}

inline std::vector<int> blocked_positions(int k) {
  const int n = k + 1;
  std::vector<int> pos(static_cast<std::size_t>(2 * n));
  for (int p = 0; p < 2 * n; ++p)
    pos[std::size_t(p)] = (p % 2) * n + (p / 2);
  return pos;
}

inline dmat permute_symmetric(const dmat& m, std::span<const int> pos) {
  const auto d = Eigen::Index(pos.size());
  if (m.rows() != d || m.cols() != d)
    throw std::invalid_argument("permutation size mismatch");
  dmat out(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      out(i, j) = m(pos[std::size_t(i)], pos[std::size_t(j)]);
  return out;
}

// ---------------------------------------------------------------------------
// Grow a maintained inverse by one interleaved time layer: prev_inv is the
// inverse of the 2k x 2k top-left block, bnew the 2k x 2 cross block, anew
// the new 2 x 2 diagonal block. Fails if the Schur complement of the old
// block has an eigenvalue below 1e-10.
inline dmat schur_update(const dmat& prev_inv, const dmat& bnew,
                         const dmat& anew) {
  const auto m = prev_inv.rows();
  if (prev_inv.cols() != m) throw std::invalid_argument("inverse not square");
  if (bnew.rows() != m || bnew.cols() != 2)
    throw std::invalid_argument("cross block must be " + std::to_string(m) +
                                " x 2");
  if (anew.rows() != 2 || anew.cols() != 2)
    throw std::invalid_argument("new diagonal block must be 2 x 2");

  const dmat u = prev_inv * bnew;  // m x 2
  dmat s = anew - bnew.transpose() * u;
  s = 0.5 * (s + s.transpose());
  const double tr2 = 0.5 * (s(0, 0) + s(1, 1));
  const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
  const double disc = std::sqrt(std::max(0.0, tr2 * tr2 - det));
  const double lo = tr2 - disc;
  if (!(lo >= 1e-10))
    throw singular_error("schur complement near singular: size " +
                         std::to_string(m + 2) + ", min eigenvalue " +
                         detail::fmt_g17(lo) + ", condition estimate " +
                         detail::fmt_g17(lo > 0 ? (tr2 + disc) / lo
                                                : std::nan("")));
  dmat sinv(2, 2);
  sinv << s(1, 1) / det, -s(0, 1) / det, -s(1, 0) / det, s(0, 0) / det;

  dmat out(m + 2, m + 2);
  if (m > 0) {
    const dmat usu = u * sinv * u.transpose();
    out.topLeftCorner(m, m) = prev_inv + 0.5 * (usu + usu.transpose());
    out.topRightCorner(m, 2) = -u * sinv;
    out.bottomLeftCorner(2, m) = out.topRightCorner(m, 2).transpose();
  }
  out.bottomRightCorner(2, 2) = sinv;
  return out;
}

// ---------------------------------------------------------------------------
// Covariance state of the affine dynamics on the infinite kappa-regular
// tree at horizon k. Blocks are trajectory covariances Cov(X_u[k], X_v[k])
// at vertex distance 0, 1, 2; the vectors c0..c3 are Cov(X_u[k], X_v(k)) at
// distances 0..3, and a0..a4 the same-time scalars at distances 0..4.
// pair_inv is the maintained inverse of the interleaved-order covariance of
// (X_u[k], X_v[k]) for adjacent u, v.
struct cov_state {
  int kappa = 0;
  double a = 0, b = 0, c = 0;
  int k = 0;
  std::vector<double> m;  // mean sequence m_0..m_k
  dmat omega0, omega1, omega2;
  dvec c0, c1, c2, c3;
  double a0 = 1, a1 = 0, a2 = 0, a3 = 0, a4 = 0;
  dmat pair_inv;
  double step_seconds = 0;
};

inline cov_state make_cov_state(int kappa, double a, double b, double c) {
  if (kappa < 1) throw std::invalid_argument("branching degree must be >= 1");
  cov_state s;
  s.kappa = kappa;
  s.a = a;
  s.b = b;
  s.c = c;
  s.k = 0;
  s.m = {0.0};
  s.omega0 = dmat::Constant(1, 1, 1.0);
  s.omega1 = dmat::Zero(1, 1);
  s.omega2 = dmat::Zero(1, 1);
  s.c0 = dvec::Constant(1, 1.0);
  s.c1 = dvec::Zero(1);
  s.c2 = dvec::Zero(1);
  s.c3 = dvec::Zero(1);
  s.a0 = 1;
  s.a1 = s.a2 = s.a3 = s.a4 = 0;
  s.pair_inv = dmat::Identity(2, 2);
  return s;
}

// Blocked-order covariance of an adjacent trajectory pair.
inline dmat upsilon_blocked(const cov_state& s) {
  const auto n = s.omega0.rows();
  dmat u(2 * n, 2 * n);
  u.topLeftCorner(n, n) = s.omega0;
  u.topRightCorner(n, n) = s.omega1;
  u.bottomLeftCorner(n, n) = s.omega1;
  u.bottomRightCorner(n, n) = s.omega0;
  return u;
}

inline dmat upsilon_interleaved(const cov_state& s) {
  return permute_symmetric(upsilon_blocked(s), blocked_positions(s.k));
}

inline dmat upsilon_inv_blocked(const cov_state& s) {
  return permute_symmetric(s.pair_inv, interleaved_positions(s.k));
}

// One horizon step. The same-time scalars follow from expanding the affine
// update over neighbor pairs at each distance; the distance-3 vector and
// distance-4 scalar come from regressing the far vertex onto the trajectory
// pair separating it from the near one.
inline cov_state cov_step(const cov_state& s) {
  const auto t_start = std::chrono::steady_clock::now();
  const int n = s.k + 1;
  const double a = s.a, b = s.b;
  const double kp = s.kappa;

  cov_state o;
  o.kappa = s.kappa;
  o.a = s.a;
  o.b = s.b;
  o.c = s.c;
  o.k = s.k + 1;
  o.m = s.m;
  o.m.push_back((a + kp * b) * s.m.back() + s.c);

  o.a0 = (a * a + kp * b * b) * s.a0 + 2 * a * b * kp * s.a1 +
         kp * (kp - 1) * b * b * s.a2 + 1.0;
  o.a1 = 2 * a * b * s.a0 + (a * a + (2 * kp - 1) * b * b) * s.a1 +
         2 * a * b * (kp - 1) * s.a2 + (kp - 1) * (kp - 1) * b * b * s.a3;
  o.a2 = b * b * s.a0 + 2 * a * b * s.a1 +
         (a * a + 2 * (kp - 1) * b * b) * s.a2 + 2 * a * b * (kp - 1) * s.a3 +
         (kp - 1) * (kp - 1) * b * b * s.a4;

  const dvec b0 = a * s.c0 + kp * b * s.c1;
  const dvec b1 = a * s.c1 + b * s.c0 + (kp - 1) * b * s.c2;
  const dvec b2 = a * s.c2 + b * s.c1 + (kp - 1) * b * s.c3;

  auto grow = [n](const dmat& om, const dvec& col, double corner) {
    dmat out(n + 1, n + 1);
    out.topLeftCorner(n, n) = om;
    out.topRightCorner(n, 1) = col;
    out.bottomLeftCorner(1, n) = col.transpose();
    out(n, n) = corner;
    return out;
  };
  o.omega0 = grow(s.omega0, b0, o.a0);
  o.omega1 = grow(s.omega1, b1, o.a1);
  o.omega2 = grow(s.omega2, b2, o.a2);

  auto stack = [n](const dvec& top, double bottom) {
    dvec out(n + 1);
    out.head(n) = top;
    out(n) = bottom;
    return out;
  };
  o.c0 = stack(b0, o.a0);
  o.c1 = stack(b1, o.a1);
  o.c2 = stack(b2, o.a2);

  dmat bt(2 * n, 2);
  for (int t = 0; t < n; ++t) {
    bt(2 * t, 0) = b0(t);
    bt(2 * t, 1) = b1(t);
    bt(2 * t + 1, 0) = b1(t);
    bt(2 * t + 1, 1) = b0(t);
  }
  dmat at(2, 2);
  at << o.a0, o.a1, o.a1, o.a0;
  o.pair_inv = schur_update(s.pair_inv, bt, at);

  // Regression operators onto the separating adjacent pair, evaluated as
  // dense products; these dominate the step cost.
  const dmat uinv = upsilon_inv_blocked(o);
  const int nn = n + 1;
  const dmat proj = detail::hcat(o.omega1, o.omega2) * uinv;
  dvec e(2 * nn);
  e << o.c2, o.c1;
  o.c3 = proj * e;
  o.a3 = o.c3(nn - 1);

  dmat mid(2 * nn, 2 * nn);
  mid.topLeftCorner(nn, nn) = o.omega2;
  mid.topRightCorner(nn, nn) = o.omega1;
  mid.bottomLeftCorner(nn, nn) = o.omega1;
  mid.bottomRightCorner(nn, nn) = o.omega0;
  const dmat through = uinv * mid;
  dvec f(2 * nn);
  f << o.c1, o.c2;
  o.a4 = f.dot(through * (uinv * f));

  o.step_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return o;
}

// ---------------------------------------------------------------------------
// Same-time covariance table for the kappa-regular tree, indexed by time j
// and vertex distance d: expanding the update over neighbor pairs couples
// distance d only to distances d-2..d+2, so the table fills in O(k^2).
// Returns rows j = 0..k, each of width k+3 (distances 0..k+2). The drift c
// shifts means only and does not enter.
inline std::vector<std::vector<double>> distance_recurrence_oracle(
    double a, double b, double /*c*/, int kappa, int k) {
  if (k < 0) throw std::invalid_argument("negative horizon");
  if (kappa < 1) throw std::invalid_argument("branching degree must be >= 1");
  const double kp = kappa;
  const int width = 3 * k + 3;
  std::vector<double> row(static_cast<std::size_t>(width), 0.0);
  row[0] = 1.0;
  std::vector<std::vector<double>> table;
  table.reserve(static_cast<std::size_t>(k) + 1);
  auto emit = [&](const std::vector<double>& r) {
    table.emplace_back(r.begin(), r.begin() + (k + 3));
  };
  emit(row);
  std::vector<double> next(static_cast<std::size_t>(width), 0.0);
  for (int j = 0; j < k; ++j) {
    auto at = [&](int d) { return d < width ? row[std::size_t(d)] : 0.0; };
    next[0] = (a * a + kp * b * b) * at(0) + 2 * a * b * kp * at(1) +
              kp * (kp - 1) * b * b * at(2) + 1.0;
    if (width > 1)
      next[1] = 2 * a * b * at(0) + (a * a + (2 * kp - 1) * b * b) * at(1) +
                2 * a * b * (kp - 1) * at(2) +
                (kp - 1) * (kp - 1) * b * b * at(3);
    for (int d = 2; d < width; ++d)
      next[std::size_t(d)] =
          b * b * at(d - 2) + 2 * a * b * at(d - 1) +
          (a * a + 2 * (kp - 1) * b * b) * at(d) +
          2 * a * b * (kp - 1) * at(d + 1) +
          (kp - 1) * (kp - 1) * b * b * at(d + 2);
    row.swap(next);
    emit(row);
  }
  return table;
}

// ---------------------------------------------------------------------------
// CSV export: one row per horizon with the same-time scalars, the mean, and
// the wall time of the step that produced the state.
inline std::string cov_csv_header() {
  return "k,A0,A1,A2,A3,A4,m,step_seconds\n";
}

inline std::string cov_csv_row(const cov_state& s) {
  std::string out = std::to_string(s.k);
  for (double x : {s.a0, s.a1, s.a2, s.a3, s.a4, s.m.back(), s.step_seconds})
    out += "," + detail::fmt_g17(x);
  out += "\n";
  return out;
}

// Dense text dump, row-major, 17 significant digits, one line per row.
inline std::string matrix_text(const dmat& m) {
  std::string out;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out += ' ';
      out += detail::fmt_g17(m(i, j));
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Almost-regular tree: the root has kappa children, every first child has
// kappa_tilde children, every later child has kappa-1 children. The global
// distance symmetry is gone, but subtrees hanging below any first-child
// edge are isomorphic (likewise below any later-child edge), so the
// conditional law of a subtree given its top trajectory pair matches that
// of the reference subtree below vertex 1 (or 2) given (X_1, X_0) (or
// (X_2, X_0)). The joint law of the root's first two generations therefore
// closes on itself, with three extra blocks for distinct-sibling pairs that
// share no representative inside the tracked set.
//
// Internal vertex labels are digit strings: '1' steps to the first child,
// '2' to a later child, '3' to a second, distinct later child of the same
// parent. Sibling subtrees below later children are exchangeable, which is
// what collapses every needed pair to these labels.
struct regularish_state {
  int kappa = 0, kappa_tilde = 0;
  double a = 0, b = 0;
  int k = 0;
  std::vector<std::string> reps;  // "", "1", "11", ("12",) "2", "21", "22"
  std::vector<dmat> blocks;       // reps.size()^2 trajectory blocks, row-major
  dmat sib_root;   // pair of distinct later children of the root
  dmat sib_first;  // ... of a first-child vertex; empty unless kappa_tilde >= 3
  dmat sib_later;  // ... of a later-child vertex; empty unless kappa >= 4
  double step_seconds = 0;

  int rep_index(const std::string& v) const {
    for (std::size_t i = 0; i < reps.size(); ++i)
      if (reps[i] == v) return int(i);
    return -1;
  }
  const dmat& block_at(int i, int j) const {
    return blocks[std::size_t(i) * reps.size() + std::size_t(j)];
  }
};

inline regularish_state make_regularish_state(int kappa, int kappa_tilde,
                                              double a, double b) {
  if (kappa < 3) throw std::invalid_argument("kappa must be >= 3");
  if (kappa_tilde < 1) throw std::invalid_argument("kappa_tilde must be >= 1");
  regularish_state s;
  s.kappa = kappa;
  s.kappa_tilde = kappa_tilde;
  s.a = a;
  s.b = b;
  s.k = 0;
  s.reps = {"", "1", "11"};
  if (kappa_tilde >= 2) s.reps.push_back("12");
  s.reps.insert(s.reps.end(), {"2", "21", "22"});
  const std::size_t r = s.reps.size();
  s.blocks.assign(r * r, dmat::Zero(1, 1));
  for (std::size_t i = 0; i < r; ++i) s.blocks[i * r + i](0, 0) = 1.0;
  s.sib_root = dmat::Zero(1, 1);
  if (kappa_tilde >= 3) s.sib_first = dmat::Zero(1, 1);
  if (kappa >= 4) s.sib_later = dmat::Zero(1, 1);
  return s;
}

namespace detail {

// Per-step workspace for the almost-regular advance: reference regression
// weights plus a memo of derived trajectory blocks, keyed by canonical
// label pairs.
struct rish_ctx {
  const regularish_state& s;
  int n;
  double a, b;
  int kap, kt;
  dmat g_ff, g_fl, g_lf, g_ll;  // g_<parent kind><child kind>, 2n x n
  dmat ups_first, ups_later;    // Var((X_1,X_0)), Var((X_2,X_0)), 2n x 2n
  std::map<std::pair<std::string, std::string>, dmat> memo;

  explicit rish_ctx(const regularish_state& st)
      : s(st), n(st.k + 1), a(st.a), b(st.b), kap(st.kappa),
        kt(st.kappa_tilde) {
    auto pairvar = [&](const std::string& v) {
      return vcat(hcat(rep(v, v), rep(v, "")), hcat(rep("", v), rep("", "")));
    };
    ups_first = pairvar("1");
    ups_later = pairvar("2");
    require_invertible(ups_first, "first-child pair covariance");
    require_invertible(ups_later, "later-child pair covariance");
    Eigen::LDLT<dmat> ldf(ups_first), ldl(ups_later);
    g_ff = ldf.solve(vcat(rep("1", "11"), rep("", "11")));
    if (kt >= 2) g_fl = ldf.solve(vcat(rep("1", "12"), rep("", "12")));
    g_lf = ldl.solve(vcat(rep("2", "21"), rep("", "21")));
    g_ll = ldl.solve(vcat(rep("2", "22"), rep("", "22")));
  }

  dmat rep(const std::string& u, const std::string& v) const {
    const int i = s.rep_index(u), j = s.rep_index(v);
    if (i < 0 || j < 0) throw std::logic_error("not a tracked vertex pair");
    return s.block_at(i, j);
  }

  static std::string parent(const std::string& v) {
    return v.substr(0, v.size() - 1);
  }

  // Canonical form of an ordered vertex pair under permutations of
  // exchangeable sibling subtrees: shared-path coordinates and suffixes map
  // later steps to '2'; at the fork, two later branches become '2' and '3'.
  static std::pair<std::string, std::string> canon(const std::string& u,
                                                   const std::string& v) {
    std::size_t l = 0;
    while (l < u.size() && l < v.size() && u[l] == v[l]) ++l;
    auto step = [](char c) { return c == '1' ? '1' : '2'; };
    std::string cu, cv;
    for (std::size_t i = 0; i < l; ++i) cu += step(u[i]);
    cv = cu;
    if (l < u.size() && l < v.size()) {
      const bool both_later = u[l] != '1' && v[l] != '1';
      cu += both_later ? '2' : step(u[l]);
      cv += both_later ? '3' : step(v[l]);
      ++l;
    }
    for (std::size_t i = l; i < u.size(); ++i) cu += step(u[i]);
    for (std::size_t i = l; i < v.size(); ++i) cv += step(v[i]);
    return {cu, cv};
  }

  const dmat& regression(const std::string& par, const std::string& child) {
    const bool pf = par.back() == '1';
    const bool cf = child.back() == '1';
    const dmat& g = pf ? (cf ? g_ff : g_fl) : (cf ? g_lf : g_ll);
    if (g.size() == 0) throw std::logic_error("regression outside the tree");
    return g;
  }

  // Trajectory block Cov(X_u[k], X_v[k]) for any pair reachable from the
  // tracked set through one neighbor expansion.
  dmat blk(const std::string& u, const std::string& v) {
    auto [cu, cv] = canon(u, v);
    {
      const int i = s.rep_index(cu), j = s.rep_index(cv);
      if (i >= 0 && j >= 0) return s.block_at(i, j);
    }
    auto sib = [&](const char* x, const char* y, const dmat& m) {
      return cu == x && cv == y && m.size() > 0;
    };
    if (sib("2", "3", s.sib_root)) return s.sib_root;
    if (sib("12", "13", s.sib_first)) return s.sib_first;
    if (sib("22", "23", s.sib_later)) return s.sib_later;
    if (cu.size() > cv.size()) {
      dmat t = blk(cv, cu);
      return t.transpose();
    }
    if (auto it = memo.find({cu, cv}); it != memo.end()) return it->second;

    const std::string p = parent(cv);
    const std::string g = parent(p);
    dmat out;
    if (cu == cv || (!cu.empty() && parent(cu) == p)) {
      // Siblings (or one deep vertex twice): conditionally on the
      // (parent, grandparent) pair the children carry the reference
      // residual, so only the pair covariance differs from the reference.
      const bool pf = p.back() == '1';
      auto ref_child = [&](const std::string& x) {
        return std::string(pf ? "1" : "2") + (x.back() == '1' ? "1" : "2");
      };
      dmat refblock;
      if (cu != cv && cu.back() != '1' && cv.back() != '1') {
        const dmat& m = pf ? s.sib_first : s.sib_later;
        if (m.size() == 0) throw std::logic_error("missing sibling block");
        refblock = m;
      } else {
        refblock = blk(ref_child(cu), ref_child(cv));
      }
      const dmat pv =
          vcat(hcat(blk(p, p), blk(p, g)), hcat(blk(g, p), blk(g, g)));
      const dmat& upsref = pf ? ups_first : ups_later;
      out = refblock + regression(p, cu).transpose() * (pv - upsref) *
                           regression(p, cv);
    } else {
      out = hcat(blk(cu, p), blk(cu, g)) * regression(p, cv);
    }
    return memo.emplace(std::make_pair(cu, cv), std::move(out))
        .first->second;
  }

  double corner(const std::string& u, const std::string& v) {
    return blk(u, v)(n - 1, n - 1);
  }

  dvec lastcol(const std::string& u, const std::string& v) {
    return blk(u, v).col(n - 1);
  }

  // Neighbors as (label, multiplicity); distinct later children beyond the
  // first are collapsed onto one '3' branch.
  std::vector<std::pair<std::string, double>> nbrs(
      const std::string& v) const {
    std::vector<std::pair<std::string, double>> out;
    if (!v.empty()) out.emplace_back(parent(v), 1.0);
    const int later =
        v.empty() ? kap - 1 : (v.back() == '1' ? kt - 1 : kap - 2);
    out.emplace_back(v + "1", 1.0);
    if (later >= 1) out.emplace_back(v + "2", 1.0);
    if (later >= 2) out.emplace_back(v + "3", double(later - 1));
    return out;
  }

  // Cov(X_u[k], X_v(k+1)).
  dvec bnew(const std::string& u, const std::string& v) {
    dvec out = a * lastcol(u, v);
    for (const auto& [w, m] : nbrs(v)) out += b * m * lastcol(u, w);
    return out;
  }

  // Cov(X_u(k+1), X_v(k+1)). Entries with multiplicity m stand for m
  // exchangeable vertices, so a self-paired entry splits into m identical
  // pairs and m(m-1) distinct-sibling pairs.
  double anew(const std::string& u, const std::string& v) {
    std::vector<std::pair<std::string, double>> lu{{u, 0.0}}, lv{{v, 0.0}};
    auto fill = [&](std::vector<std::pair<std::string, double>>& l,
                    const std::string& x) {
      l.front() = {x, 1.0};
      for (const auto& e : nbrs(x)) l.push_back(e);
    };
    fill(lu, u);
    fill(lv, v);
    auto coef = [&](std::size_t i) { return i == 0 ? a : b; };
    double total = u == v ? 1.0 : 0.0;
    for (std::size_t i = 0; i < lu.size(); ++i)
      for (std::size_t j = 0; j < lv.size(); ++j) {
        const double cc = coef(i) * coef(j);
        const auto& [wi, mi] = lu[i];
        const auto& [wj, mj] = lv[j];
        if (u == v && i == j) {
          total += cc * mi * corner(wi, wi);
          if (mi > 1.0) {
            std::string partner = wi;
            partner.back() = char(partner.back() + 1);
            total += cc * mi * (mi - 1.0) * corner(wi, partner);
          }
        } else {
          total += cc * mi * mj * corner(wi, wj);
        }
      }
    return total;
  }
};

}  // namespace detail

// One horizon step of the almost-regular state; kappa and kappa_tilde must
// restate the values the state was built with.
inline regularish_state regularish_cov_step(const regularish_state& s,
                                            int kappa, int kappa_tilde) {
  if (kappa != s.kappa || kappa_tilde != s.kappa_tilde)
    throw std::invalid_argument("tree shape differs from the state");
  const auto t_start = std::chrono::steady_clock::now();
  detail::rish_ctx ctx(s);
  const int n = s.k + 1;
  const std::size_t r = s.reps.size();

  regularish_state o;
  o.kappa = s.kappa;
  o.kappa_tilde = s.kappa_tilde;
  o.a = s.a;
  o.b = s.b;
  o.k = s.k + 1;
  o.reps = s.reps;
  o.blocks.assign(r * r, dmat());

  auto grow = [n](const dmat& old, const dvec& right, const dvec& down,
                  double corner) {
    dmat out(n + 1, n + 1);
    out.topLeftCorner(n, n) = old;
    out.topRightCorner(n, 1) = right;
    out.bottomLeftCorner(1, n) = down.transpose();
    out(n, n) = corner;
    return out;
  };
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i; j < r; ++j) {
      const dvec bij = ctx.bnew(s.reps[i], s.reps[j]);
      const dvec bji = i == j ? bij : ctx.bnew(s.reps[j], s.reps[i]);
      const double aij = ctx.anew(s.reps[i], s.reps[j]);
      o.blocks[i * r + j] = grow(s.block_at(int(i), int(j)), bij, bji, aij);
      if (i != j) o.blocks[j * r + i] = o.blocks[i * r + j].transpose();
    }

  // Exchanging the two siblings maps Cov(X_x[k], X_y(k+1)) onto
  // Cov(X_y[k], X_x(k+1)), so one cross vector serves both borders.
  auto grow_sib = [&](const dmat& old, const std::string& x,
                      const std::string& y) {
    const dvec bxy = ctx.bnew(x, y);
    return grow(old, bxy, bxy, ctx.anew(x, y));
  };
  o.sib_root = grow_sib(s.sib_root, "2", "3");
  if (s.sib_first.size() > 0)
    o.sib_first = grow_sib(s.sib_first, "12", "13");
  if (s.sib_later.size() > 0)
    o.sib_later = grow_sib(s.sib_later, "22", "23");

  o.step_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return o;
}

// Tracked-pair block by vertex label ("" or "ø" for the root).
inline dmat regularish_block(const regularish_state& s, std::string u,
                             std::string v) {
  if (u == "\xc3\xb8") u.clear();
  if (v == "\xc3\xb8") v.clear();
  const int i = s.rep_index(u), j = s.rep_index(v);
  if (i < 0 || j < 0) throw std::invalid_argument("not a tracked vertex");
  return s.block_at(i, j);
}

// Full tracked covariance as one labeled joint. First moments are
// identically zero here: a drift term shifts means only and leaves every
// covariance untouched, so it is not part of the state.
inline gaussian_joint regularish_sigma(const regularish_state& s) {
  const int n = s.k + 1;
  const auto r = Eigen::Index(s.reps.size());
  gaussian_joint j;
  j.mean = dvec::Zero(r * n);
  j.cov.resize(r * n, r * n);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index l = 0; l < r; ++l)
      j.cov.block(i * n, l * n, n, n) = s.block_at(int(i), int(l));
  j.labels.reserve(std::size_t(r * n));
  for (const auto& v : s.reps) {
    const std::string name = v.empty() ? "\xc3\xb8" : v;
    for (int t = 0; t < n; ++t)
      j.labels.push_back(name + "(" + std::to_string(t) + ")");
  }
  return j;
}

}  // namespace pca
