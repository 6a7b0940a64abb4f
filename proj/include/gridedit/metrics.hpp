#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gridedit/core/error.hpp"
#include "gridedit/core/image.hpp"
#include "gridedit/core/rng.hpp"
#include "gridedit/edit.hpp"
#include "gridedit/tasks.hpp"

namespace gridedit {

enum class ExtractorKind { fixed_random_conv, flat_pixels };

inline std::string to_string(ExtractorKind k) {
    return k == ExtractorKind::fixed_random_conv ? "fixed_random_conv" : "flat_pixels";
}

inline ExtractorKind extractor_kind_from_string(const std::string& s) {
    if (s == "fixed_random_conv") return ExtractorKind::fixed_random_conv;
    if (s == "flat_pixels") return ExtractorKind::flat_pixels;
    throw ConfigError("unknown feature extractor '" + s + "'");
}

// Fixed image embedding used on both sides of every distance.
//   fixed_random_conv: three 3x3 stride-2 conv + ReLU layers (16, 32, 64
//                      channels, He-normal weights from `seed`), global mean pool.
//   flat_pixels:       the raw pixel vector.
class FeatureExtractor {
public:
    explicit FeatureExtractor(ExtractorKind kind = ExtractorKind::fixed_random_conv, std::uint64_t seed = 0)
        : kind_(kind), seed_(seed) {
        if (kind_ != ExtractorKind::fixed_random_conv) return;
        Rng rng = make_rng(seed, Stream::eval, 0xfea7);
        int cin = 3;
        for (int cout : kWidths) {
            Layer l{cin, cout, std::vector<double>(static_cast<std::size_t>(cout) * cin * 9), std::vector<double>(cout)};
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (cin * 9)));
            for (auto& w : l.w) w = dist(rng);
            for (auto& b : l.b) b = 0.1 * dist(rng);
            layers_.push_back(std::move(l));
            cin = cout;
        }
    }

    ExtractorKind kind() const { return kind_; }
    std::uint64_t seed() const { return seed_; }
    int output_dim() const { return kind_ == ExtractorKind::fixed_random_conv ? kWidths[2] : -1; }

    std::vector<double> operator()(const Image& img) const {
        if (kind_ == ExtractorKind::flat_pixels) return {img.pixels.begin(), img.pixels.end()};
        if (img.channels != 3) throw ShapeError("feature extractor expects 3 channels, got " + img.shape_string());
        int h = img.height, w = img.width;
        std::vector<double> x(img.size());
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        for (std::size_t p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c) x[c * hw + p] = 2.0 * img.pixels[p * 3 + c] - 1.0;
        for (const auto& l : layers_) {
            const int oh = (h + 1) / 2, ow = (w + 1) / 2;
            std::vector<double> y(static_cast<std::size_t>(l.cout) * oh * ow);
            for (int co = 0; co < l.cout; ++co)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        double acc = l.b[co];
                        for (int ci = 0; ci < l.cin; ++ci)
                            for (int ky = 0; ky < 3; ++ky) {
                                const int iy = 2 * oy + ky - 1;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int ix = 2 * ox + kx - 1;
                                    if (ix < 0 || ix >= w) continue;
                                    acc += l.w[((static_cast<std::size_t>(co) * l.cin + ci) * 3 + ky) * 3 + kx] *
                                           x[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
                                }
                            }
                        y[(static_cast<std::size_t>(co) * oh + oy) * ow + ox] = std::max(acc, 0.0);
                    }
            x = std::move(y);
            h = oh, w = ow;
        }
        const int c = layers_.back().cout;
        std::vector<double> out(static_cast<std::size_t>(c), 0.0);
        const std::size_t n = static_cast<std::size_t>(h) * w;
        for (int ci = 0; ci < c; ++ci) {
            for (std::size_t p = 0; p < n; ++p) out[ci] += x[ci * n + p];
            out[ci] /= double(n);
        }
        return out;
    }

    std::vector<std::vector<double>> extract(const std::vector<Image>& imgs) const {
        std::vector<std::vector<double>> out;
        out.reserve(imgs.size());
        for (const auto& im : imgs) out.push_back((*this)(im));
        return out;
    }

private:
    static constexpr int kWidths[3] = {16, 32, 64};
    struct Layer {
        int cin, cout;
        std::vector<double> w, b;
    };
    ExtractorKind kind_;
    std::uint64_t seed_;
    std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Frechet distance

inline constexpr double kCovarianceRidge = 1e-6;

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // population (1/N) covariance
    std::size_t count = 0;
};

inline Moments moments(const std::vector<std::vector<double>>& feats) {
    if (feats.empty()) throw ValidationError("cannot take moments of an empty feature set");
    const Eigen::Index d = static_cast<Eigen::Index>(feats.front().size());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(feats.size()), d);
    for (std::size_t i = 0; i < feats.size(); ++i) {
        if (static_cast<Eigen::Index>(feats[i].size()) != d) throw ShapeError("feature vectors differ in length");
        x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(feats[i].data(), d);
    }
    Moments m;
    m.count              = feats.size();
    m.mean               = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - m.mean.transpose();
    m.cov                = (c.transpose() * c) / double(feats.size());
    return m;
}

namespace detail {

inline Eigen::MatrixXd spd_power(const Eigen::MatrixXd& a, double p) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::pow(ev[i], p) : 0.0;
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// R with R R = A B for symmetric positive definite A and symmetric PSD B:
// R = A^{1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}.
inline Eigen::MatrixXd sqrtm_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != a.cols() || b.rows() != b.cols() || a.rows() != b.rows())
        throw ShapeError("sqrtm_product: matrices must be square and equal-sized");
    const Eigen::MatrixXd ah  = detail::spd_power(a, 0.5);
    const Eigen::MatrixXd aih = detail::spd_power(a, -0.5);
    const Eigen::MatrixXd mid = ah * b * ah;
    return ah * detail::spd_power(mid, 0.5) * aih;
}

// Tr((A B)^{1/2}) from the eigenvalues of A^{1/2} B A^{1/2}.
inline double trace_sqrt_product(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::MatrixXd ah  = detail::spd_power(a, 0.5);
    const Eigen::MatrixXd mid = ah * b * ah;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
    double tr = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) tr += std::sqrt(std::max(es.eigenvalues()[i], 0.0));
    return tr;
}

// ||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^{1/2}) with A, B the ridge-regularized covariances.
inline double frechet_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                                   const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b,
                                   double ridge = kCovarianceRidge) {
    if (mu_a.size() != mu_b.size() || cov_a.rows() != mu_a.size() || cov_b.rows() != mu_b.size())
        throw ShapeError("frechet distance: moment dimensions differ");
    const auto eye        = Eigen::MatrixXd::Identity(cov_a.rows(), cov_a.cols());
    const Eigen::MatrixXd a = cov_a + ridge * eye, b = cov_b + ridge * eye;
    const double mean_term = (mu_a - mu_b).squaredNorm();
    const double cov_term  = a.trace() + b.trace() - 2.0 * trace_sqrt_product(a, b);
    return std::max(0.0, mean_term + cov_term);
}

inline double frechet_distance(const Moments& a, const Moments& b, double ridge = kCovarianceRidge) {
    // Symmetrized so that swapping the arguments gives bit-identical results.
    const double ab = frechet_from_moments(a.mean, a.cov, b.mean, b.cov, ridge);
    const double ba = frechet_from_moments(b.mean, b.cov, a.mean, a.cov, ridge);
    return 0.5 * (ab + ba);
}

inline double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                               double ridge = kCovarianceRidge) {
    if (a.empty() || b.empty()) throw ValidationError("frechet distance needs non-empty feature sets");
    return frechet_distance(moments(a), moments(b), ridge);
}

inline double frechet_distance(const std::vector<Image>& a, const std::vector<Image>& b,
                               const FeatureExtractor& fx, double ridge = kCovarianceRidge) {
    if (a.empty() || b.empty()) throw ValidationError("frechet distance needs non-empty image sets");
    return frechet_distance(fx.extract(a), fx.extract(b), ridge);
}

// ---------------------------------------------------------------------------
// Cyclic fidelity

// Example-image boxes for the pair (before -> after) under `task`.
inline std::vector<std::optional<BoundingBox>> pair_boxes(const TaskSpec& task, const Image& before) {
    const auto region = task_region(task, before);
    if (!region || region->empty()) return {};
    const BoundingBox b = region->normalized(before.width, before.height);
    return {b, b};
}

inline std::uint64_t eval_seed(std::uint64_t root, std::uint64_t id, std::uint64_t leg) {
    return splitmix64(splitmix64(root ^ leg) + id);
}

namespace detail {
inline void require_eval_set(const std::vector<Sample>& set) {
    if (set.empty()) throw ValidationError("evaluation set is empty");
}

inline Image run_model(const EditModel& model, const EditRequest& req, const char* what) {
    try {
        return model(req);
    } catch (const std::exception& e) {
        rethrow_with_context(e, std::string(what) + " failed on sample " + std::to_string(req.id));
    }
}
}  // namespace detail

// Edits of E_1 instructed by (I -> I'), one per sample.
inline std::vector<Image> prompt_swap_edits(const EditModel& model, const std::vector<Sample>& set,
                                            std::uint64_t seed = 0) {
    std::vector<Image> out;
    for (const auto& s : set) {
        EditRequest r;
        r.examples = {Panel{s.query(), PanelRole::example}, Panel{s.target(), PanelRole::transformed_example}};
        r.query    = Panel{s.panels[0].pixels, PanelRole::query};
        r.boxes    = pair_boxes(s.task, s.query());
        r.truth    = s.task;
        r.seed     = eval_seed(seed, s.id, 1);
        r.id       = s.id;
        out.push_back(detail::run_model(model, r, "prompt fidelity"));
    }
    return out;
}

// Reverse edits of I' instructed by (E'_1 -> E_1), one per sample.
inline std::vector<Image> image_swap_edits(const EditModel& model, const std::vector<Sample>& set,
                                           std::uint64_t seed = 0) {
    std::vector<Image> out;
    for (const auto& s : set) {
        EditRequest r;
        r.examples = {Panel{s.panels[1].pixels, PanelRole::example}, Panel{s.panels[0].pixels, PanelRole::transformed_example}};
        r.query    = Panel{s.target(), PanelRole::query};
        if (!s.boxes.empty()) r.boxes = {s.boxes[1], s.boxes[0]};
        r.truth = inverse_task(s.task);
        r.seed  = eval_seed(seed, s.id, 2);
        r.id    = s.id;
        out.push_back(detail::run_model(model, r, "image fidelity"));
    }
    return out;
}

// Delta_prompt = FD(E', model(E | I -> I')).
inline double prompt_fidelity(const EditModel& model, const std::vector<Sample>& set, const FeatureExtractor& fx,
                              std::uint64_t seed = 0) {
    detail::require_eval_set(set);
    std::vector<Image> truth;
    for (const auto& s : set) truth.push_back(s.panels[1].pixels);
    return frechet_distance(truth, prompt_swap_edits(model, set, seed), fx);
}

// Delta_image = FD(I, model(I' | E' -> E)).
inline double image_fidelity(const EditModel& model, const std::vector<Sample>& set, const FeatureExtractor& fx,
                             std::uint64_t seed = 0) {
    detail::require_eval_set(set);
    std::vector<Image> truth;
    for (const auto& s : set) truth.push_back(s.query());
    return frechet_distance(truth, image_swap_edits(model, set, seed), fx);
}

struct DirectionResult {
    double mean     = 0.0;
    int used        = 0;
    int excluded    = 0;  // pairs with a zero-norm delta
};

// Mean cosine between aligned feature deltas; zero-norm deltas are excluded and counted.
inline DirectionResult direction_similarity(const std::vector<std::vector<double>>& ref_deltas,
                                            const std::vector<std::vector<double>>& gen_deltas) {
    if (ref_deltas.size() != gen_deltas.size()) throw ValidationError("direction similarity needs aligned sets");
    DirectionResult r;
    double acc = 0.0;
    for (std::size_t i = 0; i < ref_deltas.size(); ++i) {
        const auto& a = ref_deltas[i];
        const auto& b = gen_deltas[i];
        if (a.size() != b.size()) throw ShapeError("direction similarity: delta lengths differ");
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k], na += a[k] * a[k], nb += b[k] * b[k];
        if (na <= 0.0 || nb <= 0.0) {
            ++r.excluded;
            continue;
        }
        acc += std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
        ++r.used;
    }
    r.mean = r.used ? acc / double(r.used) : 0.0;
    return r;
}

inline DirectionResult direction_similarity(const std::vector<std::pair<Image, Image>>& ref,
                                            const std::vector<std::pair<Image, Image>>& gen,
                                            const FeatureExtractor& fx) {
    if (ref.size() != gen.size()) throw ValidationError("direction similarity needs aligned sets");
    auto deltas = [&](const std::vector<std::pair<Image, Image>>& pairs) {
        std::vector<std::vector<double>> out;
        for (const auto& [before, after] : pairs) {
            auto fa = fx(after);
            const auto fb = fx(before);
            for (std::size_t k = 0; k < fa.size(); ++k) fa[k] -= fb[k];
            out.push_back(std::move(fa));
        }
        return out;
    };
    return direction_similarity(deltas(ref), deltas(gen));
}

struct FidelityReport {
    double delta_prompt = 0.0;
    double delta_image  = 0.0;
    std::map<std::string, double> per_task_mae;
    std::map<std::string, int> per_task_count;
    double mean_mae             = 0.0;
    double direction_similarity = 0.0;
    int direction_excluded      = 0;
    int samples                 = 0;
    std::uint64_t extractor_seed = 0;
    std::string extractor;
};

// Forward edits of every sample plus both cyclic distances.
inline FidelityReport evaluate_model(const EditModel& model, const std::vector<Sample>& set,
                                     const FeatureExtractor& fx, std::uint64_t seed = 0) {
    detail::require_eval_set(set);
    FidelityReport rep;
    rep.samples        = static_cast<int>(set.size());
    rep.extractor_seed = fx.seed();
    rep.extractor      = to_string(fx.kind());
    std::vector<std::pair<Image, Image>> ref, gen;
    std::map<std::string, double> mae_sum;
    for (const auto& s : set) {
        EditRequest r   = request_from_sample(s, eval_seed(seed, s.id, 0));
        const Image out = detail::run_model(model, r, "forward edit");
        const std::string k = to_string(s.task.kind);
        mae_sum[k] += mean_abs_diff(out, s.target());
        rep.per_task_count[k] += 1;
        ref.emplace_back(s.panels[0].pixels, s.panels[1].pixels);
        gen.emplace_back(s.query(), out);
    }
    double total = 0.0;
    for (const auto& [k, v] : mae_sum) {
        rep.per_task_mae[k] = v / double(rep.per_task_count[k]);
        total += rep.per_task_mae[k];
    }
    rep.mean_mae = total / double(rep.per_task_mae.size());
    const auto dir           = direction_similarity(ref, gen, fx);
    rep.direction_similarity = dir.mean;
    rep.direction_excluded   = dir.excluded;
    rep.delta_prompt         = prompt_fidelity(model, set, fx, seed);
    rep.delta_image          = image_fidelity(model, set, fx, seed);
    return rep;
}

}  // namespace gridedit
