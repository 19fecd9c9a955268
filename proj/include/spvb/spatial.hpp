#ifndef SPVB_SPATIAL_HPP
#define SPVB_SPATIAL_HPP

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "spvb/parallel.hpp"

namespace spvb {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SpatialDataset {
    MatrixXd coords;  // n x 2
    MatrixXd X;       // n x p
    VectorXd y;       // n

    int n() const { return static_cast<int>(y.size()); }
    int p() const { return static_cast<int>(X.cols()); }

    void validate() const {
        if (y.size() < 1) throw std::invalid_argument("dataset: needs n >= 1 rows");
        if (X.cols() < 1) throw std::invalid_argument("dataset: needs p >= 1 covariates");
        if (coords.rows() != y.size() || X.rows() != y.size())
            throw std::invalid_argument("dataset: coords/X/y row counts differ");
        if (coords.cols() != 2) throw std::invalid_argument("dataset: coords must be n x 2");
        if (!coords.allFinite() || !X.allFinite() || !y.allFinite())
            throw std::invalid_argument("dataset: non-finite entries");
    }
};

inline double exp_correlation(double d, double phi) {
    if (!(d >= 0.0) || !std::isfinite(d)) throw std::domain_error("exp_correlation: distance must be finite and >= 0");
    if (!(phi > 0.0) || !std::isfinite(phi)) throw std::domain_error("exp_correlation: decay must be finite and > 0");
    return std::exp(-phi * d);
}

enum class OrderingPolicy { SortedByCoordinate, AsGiven, UserSupplied };

// Ordered-index neighbor structure. All positions are in processing order:
// position k handles input row order[k], and nbr entries of row i are
// positions < i, sorted nearest first (ties by smaller position).
struct NeighborGraph {
    std::vector<int> order;  // order[k] = input row processed at position k
    std::vector<int> ptr;    // CSR offsets, size n+1
    std::vector<int> nbr;    // neighbor positions
    int m = 0;

    // Reverse adjacency: for position i, the rows l with i in N[l] together
    // with i's slot inside N[l].
    std::vector<int> rev_ptr;
    std::vector<int> rev_row;
    std::vector<int> rev_slot;

    int n() const { return static_cast<int>(order.size()); }
    int degree(int i) const { return ptr[i + 1] - ptr[i]; }
    std::span<const int> neighbors(int i) const {
        return {nbr.data() + ptr[i], static_cast<std::size_t>(degree(i))};
    }
    std::span<const int> reverse_rows(int i) const {
        return {rev_row.data() + rev_ptr[i], static_cast<std::size_t>(rev_ptr[i + 1] - rev_ptr[i])};
    }
    std::span<const int> reverse_slots(int i) const {
        return {rev_slot.data() + rev_ptr[i], static_cast<std::size_t>(rev_ptr[i + 1] - rev_ptr[i])};
    }

    void build_reverse_index() {
        int nn = n();
        rev_ptr.assign(nn + 1, 0);
        for (int j : nbr) ++rev_ptr[j + 1];
        for (int i = 0; i < nn; ++i) rev_ptr[i + 1] += rev_ptr[i];
        rev_row.resize(nbr.size());
        rev_slot.resize(nbr.size());
        std::vector<int> cursor(rev_ptr.begin(), rev_ptr.end() - 1);
        for (int l = 0; l < nn; ++l) {
            for (int s = ptr[l]; s < ptr[l + 1]; ++s) {
                int j = nbr[s];
                rev_row[cursor[j]] = l;
                rev_slot[cursor[j]] = s - ptr[l];
                ++cursor[j];
            }
        }
    }
};

namespace detail {

inline double sq_dist(const MatrixXd& c, int a, int b) {
    double dx = c(a, 0) - c(b, 0);
    double dy = c(a, 1) - c(b, 1);
    return dx * dx + dy * dy;
}

// Candidate ordering used for nearest-neighbor selection: distance first,
// then position, so ties are broken deterministically.
struct Cand {
    double d2;
    int pos;
    bool operator<(const Cand& o) const { return d2 < o.d2 || (d2 == o.d2 && pos < o.pos); }
};

// Incremental kd-tree over already-processed positions. Points are inserted
// in processing order and queried before insertion, so results are exactly
// the m nearest predecessors.
class IncrementalKdTree {
public:
    explicit IncrementalKdTree(const MatrixXd& pts) : pts_(pts) {
        nodes_.reserve(static_cast<std::size_t>(pts.rows()));
    }

    void insert(int pos) {
        nodes_.push_back({pos, -1, -1});
        int id = static_cast<int>(nodes_.size()) - 1;
        if (id == 0) {
            root_ = 0;
            return;
        }
        int cur = root_;
        int depth = 0;
        for (;;) {
            int axis = depth & 1;
            Node& nd = nodes_[static_cast<std::size_t>(cur)];
            bool left = pts_(pos, axis) < pts_(nd.pos, axis);
            int& child = left ? nd.lo : nd.hi;
            if (child < 0) {
                child = id;
                return;
            }
            cur = child;
            ++depth;
        }
    }

    // k nearest inserted points to query position q, nearest first.
    void query(int q, int k, std::vector<Cand>& out) const {
        out.clear();
        if (root_ < 0 || k <= 0) return;
        search(root_, 0, q, k, out);
        std::sort_heap(out.begin(), out.end());
    }

private:
    struct Node {
        int pos, lo, hi;
    };

    void search(int id, int depth, int q, int k, std::vector<Cand>& heap) const {
        const Node& nd = nodes_[static_cast<std::size_t>(id)];
        Cand c{sq_dist(pts_, q, nd.pos), nd.pos};
        if (static_cast<int>(heap.size()) < k) {
            heap.push_back(c);
            std::push_heap(heap.begin(), heap.end());
        } else if (c < heap.front()) {
            std::pop_heap(heap.begin(), heap.end());
            heap.back() = c;
            std::push_heap(heap.begin(), heap.end());
        }
        int axis = depth & 1;
        double delta = pts_(q, axis) - pts_(nd.pos, axis);
        int near = delta < 0.0 ? nd.lo : nd.hi;
        int far = delta < 0.0 ? nd.hi : nd.lo;
        if (near >= 0) search(near, depth + 1, q, k, heap);
        bool full = static_cast<int>(heap.size()) >= k;
        if (far >= 0 && (!full || delta * delta <= heap.front().d2)) search(far, depth + 1, q, k, heap);
    }

    const MatrixXd& pts_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

}  // namespace detail

inline std::vector<int> default_ordering(const MatrixXd& coords) {
    std::vector<int> order(static_cast<std::size_t>(coords.rows()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (coords(a, 0) != coords(b, 0)) return coords(a, 0) < coords(b, 0);
        if (coords(a, 1) != coords(b, 1)) return coords(a, 1) < coords(b, 1);
        return a < b;
    });
    return order;
}

inline NeighborGraph build_neighbor_graph(const MatrixXd& coords, int m,
                                          OrderingPolicy policy = OrderingPolicy::SortedByCoordinate,
                                          const std::vector<int>* user_order = nullptr) {
    int n = static_cast<int>(coords.rows());
    if (n < 1) throw std::invalid_argument("neighbor graph: needs n >= 1");
    if (m < 1) throw std::invalid_argument("neighbor graph: needs m >= 1");
    if (m >= n && n > 1) {
        std::cerr << "spvb: m=" << m << " >= n=" << n << ", clamping to " << (n - 1) << "\n";
        m = n - 1;
    }
    if (n == 1) m = 1;

    NeighborGraph g;
    g.m = m;
    switch (policy) {
        case OrderingPolicy::SortedByCoordinate:
            g.order = default_ordering(coords);
            break;
        case OrderingPolicy::AsGiven:
            g.order.resize(static_cast<std::size_t>(n));
            std::iota(g.order.begin(), g.order.end(), 0);
            break;
        case OrderingPolicy::UserSupplied: {
            if (!user_order || static_cast<int>(user_order->size()) != n)
                throw std::invalid_argument("neighbor graph: user ordering has wrong length");
            std::vector<char> seen(static_cast<std::size_t>(n), 0);
            for (int v : *user_order) {
                if (v < 0 || v >= n || seen[static_cast<std::size_t>(v)])
                    throw std::invalid_argument("neighbor graph: user ordering is not a permutation");
                seen[static_cast<std::size_t>(v)] = 1;
            }
            g.order = *user_order;
            break;
        }
    }

    MatrixXd pts(n, 2);
    for (int k = 0; k < n; ++k) pts.row(k) = coords.row(g.order[static_cast<std::size_t>(k)]);

    g.ptr.assign(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 0; i < n; ++i) g.ptr[static_cast<std::size_t>(i) + 1] = g.ptr[static_cast<std::size_t>(i)] + std::min(i, m);
    g.nbr.resize(static_cast<std::size_t>(g.ptr[static_cast<std::size_t>(n)]));

    constexpr int kBruteForceLimit = 2000;
    if (n <= kBruteForceLimit) {
        std::vector<detail::Cand> cand;
        for (int i = 1; i < n; ++i) {
            int k = std::min(i, m);
            cand.resize(static_cast<std::size_t>(i));
            for (int j = 0; j < i; ++j) cand[static_cast<std::size_t>(j)] = {detail::sq_dist(pts, i, j), j};
            std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
            for (int s = 0; s < k; ++s) g.nbr[static_cast<std::size_t>(g.ptr[static_cast<std::size_t>(i)] + s)] = cand[static_cast<std::size_t>(s)].pos;
        }
    } else {
        detail::IncrementalKdTree tree(pts);
        tree.insert(0);
        std::vector<detail::Cand> heap;
        heap.reserve(static_cast<std::size_t>(m) + 1);
        for (int i = 1; i < n; ++i) {
            tree.query(i, std::min(i, m), heap);
            for (std::size_t s = 0; s < heap.size(); ++s) g.nbr[static_cast<std::size_t>(g.ptr[static_cast<std::size_t>(i)]) + s] = heap[s].pos;
            tree.insert(i);
        }
    }
    g.build_reverse_index();
    return g;
}

// Truncation of a graph to the first m_q (nearest) neighbors per row, on the
// same ordering. Used for the variational neighbor sets.
inline NeighborGraph truncate_graph(const NeighborGraph& g, int m_q) {
    if (m_q < 0 || m_q > g.m) throw std::invalid_argument("truncate_graph: need 0 <= m_q <= m");
    NeighborGraph t;
    t.order = g.order;
    t.m = m_q;
    int n = g.n();
    t.ptr.assign(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 0; i < n; ++i)
        t.ptr[static_cast<std::size_t>(i) + 1] = t.ptr[static_cast<std::size_t>(i)] + std::min(g.degree(i), m_q);
    t.nbr.resize(static_cast<std::size_t>(t.ptr[static_cast<std::size_t>(n)]));
    for (int i = 0; i < n; ++i) {
        auto src = g.neighbors(i);
        for (int s = 0; s < std::min(g.degree(i), m_q); ++s)
            t.nbr[static_cast<std::size_t>(t.ptr[static_cast<std::size_t>(i)] + s)] = src[static_cast<std::size_t>(s)];
    }
    t.build_reverse_index();
    return t;
}

struct NngpFactors {
    std::vector<int> ptr;   // same CSR layout as the graph
    std::vector<double> b;  // regression weights, aligned with graph.nbr
    VectorXd F;             // unit-sill conditional variance ratios
    double phi = 0.0;

    std::span<const double> row(int i) const {
        return {b.data() + ptr[i], static_cast<std::size_t>(ptr[i + 1] - ptr[i])};
    }
};

// Distances needed to rebuild factors at a new decay without touching the
// coordinates again: site-to-neighbor legs plus the packed lower triangle of
// each neighbor-set distance matrix.
struct NeighborDistanceCache {
    std::vector<int> ptr;          // graph CSR offsets (copied)
    std::vector<double> d_site;    // |N[i]| entries per row
    std::vector<int> tri_ptr;      // offsets into d_pair
    std::vector<double> d_pair;    // packed strict lower triangles
    double d_max_neighborhood = 0.0;
};

inline NeighborDistanceCache build_distance_cache(const MatrixXd& coords, const NeighborGraph& g) {
    int n = g.n();
    MatrixXd pts(n, 2);
    for (int k = 0; k < n; ++k) pts.row(k) = coords.row(g.order[static_cast<std::size_t>(k)]);

    NeighborDistanceCache c;
    c.ptr = g.ptr;
    c.d_site.resize(g.nbr.size());
    c.tri_ptr.assign(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 0; i < n; ++i) {
        int k = g.degree(i);
        c.tri_ptr[static_cast<std::size_t>(i) + 1] = c.tri_ptr[static_cast<std::size_t>(i)] + k * (k - 1) / 2;
    }
    c.d_pair.resize(static_cast<std::size_t>(c.tri_ptr[static_cast<std::size_t>(n)]));

    double dmax = 0.0;
    for (int i = 0; i < n; ++i) {
        auto nb = g.neighbors(i);
        int k = static_cast<int>(nb.size());
        for (int s = 0; s < k; ++s) {
            double d = std::sqrt(detail::sq_dist(pts, i, nb[static_cast<std::size_t>(s)]));
            c.d_site[static_cast<std::size_t>(g.ptr[static_cast<std::size_t>(i)] + s)] = d;
            dmax = std::max(dmax, d);
        }
        int t = c.tri_ptr[static_cast<std::size_t>(i)];
        for (int r = 1; r < k; ++r)
            for (int s = 0; s < r; ++s) {
                double d = std::sqrt(detail::sq_dist(pts, nb[static_cast<std::size_t>(r)], nb[static_cast<std::size_t>(s)]));
                c.d_pair[static_cast<std::size_t>(t++)] = d;
                dmax = std::max(dmax, d);
            }
    }
    c.d_max_neighborhood = dmax;
    return c;
}

namespace detail {

// Solves one local correlation system. Jitter is added only when the plain
// solve is numerically unusable (duplicate coordinates).
inline void local_factor(int k, const double* dsite, const double* dpair, double phi,
                         double jitter, double* b_out, double& F_out) {
    if (k == 0) {
        F_out = 1.0;
        return;
    }
    if (k == 1) {
        double rho = std::exp(-phi * dsite[0]);
        b_out[0] = rho;
        F_out = 1.0 - rho * rho;
        if (F_out <= 0.0) {
            double cj = 1.0 + jitter;
            b_out[0] = rho / cj;
            F_out = 1.0 - rho * rho / cj;
        }
        return;
    }
    Eigen::MatrixXd C(k, k);
    Eigen::VectorXd c0(k);
    int t = 0;
    for (int r = 0; r < k; ++r) {
        C(r, r) = 1.0;
        c0(r) = std::exp(-phi * dsite[r]);
        for (int s = 0; s < r; ++s) {
            double v = std::exp(-phi * dpair[t++]);
            C(r, s) = v;
            C(s, r) = v;
        }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(C);
    if (llt.info() != Eigen::Success) {
        C.diagonal().array() += jitter;
        llt.compute(C);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("nngp factors: local correlation matrix singular even after jitter (duplicate coordinates?)");
    }
    Eigen::VectorXd bv = llt.solve(c0);
    for (int r = 0; r < k; ++r) b_out[r] = bv(r);
    F_out = 1.0 - c0.dot(bv);
    if (!(F_out > 0.0)) {
        C.diagonal().array() += jitter;
        llt.compute(C);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("nngp factors: local correlation matrix singular even after jitter (duplicate coordinates?)");
        bv = llt.solve(c0);
        for (int r = 0; r < k; ++r) b_out[r] = bv(r);
        F_out = 1.0 - c0.dot(bv);
        if (!(F_out > 0.0))
            throw std::runtime_error("nngp factors: nonpositive conditional variance (duplicate coordinates?)");
    }
}

}  // namespace detail

inline NngpFactors nngp_factors(const NeighborDistanceCache& cache, double phi) {
    if (!(phi > 0.0)) throw std::invalid_argument("nngp factors: decay must be > 0");
    int n = static_cast<int>(cache.ptr.size()) - 1;
    NngpFactors f;
    f.ptr = cache.ptr;
    f.b.resize(cache.d_site.size());
    f.F.resize(n);
    f.phi = phi;
    double jitter = 1e-10 * std::max(cache.d_max_neighborhood, 1.0);
    parallel_chunks(n, [&](int, int lo, int hi) {
        for (int i = lo; i < hi; ++i) {
            int k = cache.ptr[static_cast<std::size_t>(i) + 1] - cache.ptr[static_cast<std::size_t>(i)];
            detail::local_factor(k, cache.d_site.data() + cache.ptr[static_cast<std::size_t>(i)],
                                 cache.d_pair.data() + cache.tri_ptr[static_cast<std::size_t>(i)], phi, jitter,
                                 f.b.data() + cache.ptr[static_cast<std::size_t>(i)], f.F(i));
        }
    });
    return f;
}

inline NngpFactors nngp_factors(const MatrixXd& coords, const NeighborGraph& graph, double phi) {
    return nngp_factors(build_distance_cache(coords, graph), phi);
}

// Sum_i (w_i - b_{N[i]} w_{N[i]})^2 / F_i for a vector in processing order.
inline double prior_quadratic(const VectorXd& w, const NeighborGraph& g, const NngpFactors& f) {
    if (w.size() != g.n()) throw std::invalid_argument("prior_quadratic: length mismatch");
    double total = 0.0;
    for (int i = 0; i < g.n(); ++i) {
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        double r = w(i);
        for (std::size_t s = 0; s < nb.size(); ++s) r -= bw[s] * w(nb[s]);
        total += r * r / f.F(i);
    }
    return total;
}

// Dense unit-sill NNGP covariance (I-B)^{-1} F (I-B)^{-T}, processing order.
// Intended for reference computations at small n.
inline MatrixXd dense_nngp_covariance(const NeighborGraph& g, const NngpFactors& f) {
    int n = g.n();
    MatrixXd L = MatrixXd::Zero(n, n);  // (I-B)^{-1} F^{1/2}
    for (int i = 0; i < n; ++i) {
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(i + 1);
        for (std::size_t s = 0; s < nb.size(); ++s) row.head(i) += bw[s] * L.row(nb[s]).head(i);
        row(i) = std::sqrt(f.F(i));
        L.row(i).head(i + 1) = row;
    }
    return L * L.transpose();
}

// Dense unit-sill NNGP precision (I-B)^T F^{-1} (I-B), processing order.
inline MatrixXd dense_nngp_precision(const NeighborGraph& g, const NngpFactors& f) {
    int n = g.n();
    MatrixXd ImB = MatrixXd::Identity(n, n);
    for (int i = 0; i < n; ++i) {
        auto nb = g.neighbors(i);
        auto bw = f.row(i);
        for (std::size_t s = 0; s < nb.size(); ++s) ImB(i, nb[s]) = -bw[s];
    }
    return ImB.transpose() * f.F.cwiseInverse().asDiagonal() * ImB;
}

}  // namespace spvb

#endif
