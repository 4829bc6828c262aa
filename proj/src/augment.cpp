#include "distillforge/augment.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace distillforge {

namespace {

constexpr std::pair<AugKind, const char*> kNames[] = {
    {AugKind::Flip, "flip"},         {AugKind::Translate, "translate"},   {AugKind::Rotate, "rotate"},
    {AugKind::Scale, "scale"},       {AugKind::Cutout, "cutout"},         {AugKind::Brightness, "brightness"},
    {AugKind::Contrast, "contrast"},
};

bool geometric(AugKind k) {
    return k == AugKind::Flip || k == AugKind::Translate || k == AugKind::Rotate || k == AugKind::Scale;
}

}  // namespace

std::string to_string(AugKind k) {
    for (auto [kind, name] : kNames)
        if (kind == k) return name;
    return "unknown";
}

AugKind aug_kind_from_string(const std::string& s) {
    for (auto [kind, name] : kNames)
        if (s == name) return kind;
    throw std::invalid_argument("augment: unknown op '" + s + "'");
}

AugmentationSpec AugmentationSpec::defaults() {
    AugmentationSpec s;
    s.ops = {
        {AugKind::Flip, 0.5, 0.0, 0.0},      {AugKind::Translate, 0.5, 0.0, 0.125},
        {AugKind::Rotate, 0.5, 0.0, 15.0},   {AugKind::Scale, 0.5, 0.85, 1.15},
        {AugKind::Cutout, 0.5, 0.0, 0.25},   {AugKind::Brightness, 0.5, 0.0, 0.2},
        {AugKind::Contrast, 0.5, 0.8, 1.2},
    };
    return s;
}

void AugmentationSpec::validate() const {
    for (const auto& op : ops) {
        const std::string name = "augment." + to_string(op.kind);
        if (!(op.probability >= 0.0 && op.probability <= 1.0))
            throw std::invalid_argument(name + ".p must be in [0, 1]");
        switch (op.kind) {
            case AugKind::Translate:
                if (!(op.hi >= 0.0 && op.hi <= 0.5)) throw std::invalid_argument(name + ".hi must be in [0, 0.5]");
                break;
            case AugKind::Rotate:
                if (!(op.hi >= 0.0 && op.hi <= 180.0)) throw std::invalid_argument(name + ".hi must be in [0, 180]");
                break;
            case AugKind::Scale:
            case AugKind::Contrast:
                if (!(op.lo > 0.0 && op.lo <= op.hi)) throw std::invalid_argument(name + " needs 0 < lo <= hi");
                break;
            case AugKind::Cutout:
                if (!(op.hi >= 0.0 && op.hi <= 1.0)) throw std::invalid_argument(name + ".hi must be in [0, 1]");
                break;
            case AugKind::Brightness:
                if (!(op.hi >= 0.0)) throw std::invalid_argument(name + ".hi must be non-negative");
                break;
            case AugKind::Flip:
                break;
        }
    }
}

nlohmann::json to_json(const AugmentationSpec& s) {
    nlohmann::json ops = nlohmann::json::array();
    for (const auto& op : s.ops) ops.push_back({{"kind", to_string(op.kind)}, {"p", op.probability}, {"lo", op.lo}, {"hi", op.hi}});
    return {{"ops", ops}, {"stream", s.stream}};
}

AugmentationSpec augmentation_from_json(const nlohmann::json& j) {
    AugmentationSpec s;
    for (const auto& op : j.at("ops"))
        s.ops.push_back({aug_kind_from_string(op.at("kind").get<std::string>()), op.at("p").get<double>(),
                         op.value("lo", 0.0), op.value("hi", 0.0)});
    s.stream = j.value("stream", std::uint64_t{0});
    s.validate();
    return s;
}

bool AugDraw::identity() const {
    for (const auto& st : stages)
        for (char a : st.active)
            if (a) return false;
    return true;
}

AugDraw sample(const AugmentationSpec& spec, std::size_t batch, Rng& rng) {
    if (batch == 0) throw std::invalid_argument("augment: batch size must be at least 1");
    AugDraw draw;
    draw.batch = batch;
    for (const auto& op : spec.ops) {
        AugDraw::Stage st{op.kind, std::vector<char>(batch), std::vector<double>(batch), std::vector<double>(batch), 0.0};
        if (op.kind == AugKind::Cutout) st.extent = op.hi;
        for (std::size_t i = 0; i < batch; ++i) {
            st.active[i] = rng.bernoulli(op.probability);
            // Parameters are drawn for every image so the stream does not depend on the flags.
            switch (op.kind) {
                case AugKind::Flip:
                    break;
                case AugKind::Translate:
                    st.a[i] = rng.uniform(-op.hi, op.hi);
                    st.b[i] = rng.uniform(-op.hi, op.hi);
                    break;
                case AugKind::Rotate:
                case AugKind::Brightness:
                    st.a[i] = rng.uniform(-op.hi, op.hi);
                    break;
                case AugKind::Scale:
                case AugKind::Contrast:
                    st.a[i] = rng.uniform(op.lo, op.hi);
                    break;
                case AugKind::Cutout:
                    st.a[i] = rng.uniform();
                    st.b[i] = rng.uniform();
                    break;
            }
        }
        draw.stages.push_back(std::move(st));
    }
    return draw;
}

namespace {

/// Reflects a continuous pixel coordinate about the canvas borders (-0.5, n - 0.5).
double reflect(double x, std::size_t n) {
    const double span = static_cast<double>(n);
    double t = std::fmod(std::abs(x + 0.5), 2.0 * span);
    if (t > span) t = 2.0 * span - t;
    return std::clamp(t - 0.5, 0.0, span - 1.0);
}

void bilinear_taps(double sx, double sy, std::size_t h, std::size_t w, std::vector<ResampleMap::Tap>& taps) {
    sx = reflect(sx, w);
    sy = reflect(sy, h);
    const auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
    const std::pair<std::size_t, double> cand[] = {
        {y0 * w + x0, (1 - fx) * (1 - fy)}, {y0 * w + x1, fx * (1 - fy)},
        {y1 * w + x0, (1 - fx) * fy},       {y1 * w + x1, fx * fy}};
    for (auto [src, wt] : cand) {
        if (wt == 0.0) continue;
        auto it = std::find_if(taps.begin(), taps.end(), [src](const auto& t) { return t.source == src; });
        if (it != taps.end())
            it->weight += wt;
        else
            taps.push_back({static_cast<std::uint32_t>(src), wt});
    }
}

std::shared_ptr<const ResampleMap> geometric_map(const AugDraw::Stage& st, std::size_t n, std::size_t h, std::size_t w) {
    auto map = std::make_shared<ResampleMap>();
    map->batch = n;
    map->in_h = map->out_h = h;
    map->in_w = map->out_w = w;
    map->taps.resize(n * h * w);
    const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                auto& taps = map->taps[(b * h + y) * w + x];
                if (!st.active[b]) {
                    taps.push_back({static_cast<std::uint32_t>(y * w + x), 1.0});
                    continue;
                }
                const double u = static_cast<double>(x) - cx, v = static_cast<double>(y) - cy;
                switch (st.kind) {
                    case AugKind::Flip:
                        taps.push_back({static_cast<std::uint32_t>(y * w + (w - 1 - x)), 1.0});
                        break;
                    case AugKind::Translate:
                        bilinear_taps(static_cast<double>(x) - st.a[b] * static_cast<double>(w),
                                      static_cast<double>(y) - st.b[b] * static_cast<double>(h), h, w, taps);
                        break;
                    case AugKind::Rotate: {
                        const double r = st.a[b] * M_PI / 180.0, c = std::cos(r), s = std::sin(r);
                        bilinear_taps(c * u + s * v + cx, -s * u + c * v + cy, h, w, taps);
                        break;
                    }
                    case AugKind::Scale:
                        bilinear_taps(u / st.a[b] + cx, v / st.a[b] + cy, h, w, taps);
                        break;
                    default:
                        break;
                }
            }
    return map;
}

Tensor per_image_mean(const Tensor& x) {
    const Shape& s = x.shape();
    return broadcast_to(scale(sum_to(x, {s[0], 1, 1, 1}), 1.0 / static_cast<double>(s[1] * s[2] * s[3])), s);
}

Tensor per_image_constant(const std::vector<double>& v, const Shape& s) {
    return broadcast_to(Tensor({s[0], 1, 1, 1}, v), s);
}

}  // namespace

Tensor apply(const Tensor& batch, const AugDraw& draw) {
    if (batch.rank() != 4 || batch.shape()[0] != draw.batch)
        throw ShapeError("augment: draw for batch " + std::to_string(draw.batch) + " applied to " +
                         shape_str(batch.shape()));
    const Shape s = batch.shape();
    const std::size_t n = s[0], h = s[2], w = s[3];
    Tensor x = batch;
    for (const auto& st : draw.stages) {
        if (std::none_of(st.active.begin(), st.active.end(), [](char a) { return a != 0; })) continue;
        if (geometric(st.kind)) {
            x = resample(x, geometric_map(st, n, h, w));
            continue;
        }
        switch (st.kind) {
            case AugKind::Brightness: {
                std::vector<double> shift_by(n, 0.0);
                for (std::size_t b = 0; b < n; ++b)
                    if (st.active[b]) shift_by[b] = st.a[b];
                x = add(x, per_image_constant(shift_by, s));
                break;
            }
            case AugKind::Contrast: {
                std::vector<double> f(n, 1.0), g(n, 0.0);
                for (std::size_t b = 0; b < n; ++b)
                    if (st.active[b]) {
                        f[b] = st.a[b];
                        g[b] = 1.0 - st.a[b];
                    }
                // (x - m) c + m = x c + m (1 - c)
                x = add(mul(x, per_image_constant(f, s)), mul(per_image_mean(x), per_image_constant(g, s)));
                break;
            }
            case AugKind::Cutout: {
                std::vector<double> keep(x.size(), 1.0);
                const std::size_t c = s[1];
                const double half_h = st.extent * static_cast<double>(h) / 2.0;
                const double half_w = st.extent * static_cast<double>(w) / 2.0;
                for (std::size_t b = 0; b < n; ++b) {
                    if (!st.active[b]) continue;
                    const double cy = st.b[b] * static_cast<double>(h), cx = st.a[b] * static_cast<double>(w);
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            if (std::abs(static_cast<double>(y) + 0.5 - cy) >= half_h ||
                                std::abs(static_cast<double>(xx) + 0.5 - cx) >= half_w)
                                continue;
                            for (std::size_t ch = 0; ch < c; ++ch) keep[((b * c + ch) * h + y) * w + xx] = 0.0;
                        }
                }
                std::vector<double> fill(keep.size());
                for (std::size_t i = 0; i < keep.size(); ++i) fill[i] = 1.0 - keep[i];
                // hole pixels take the image mean
                x = add(mul(x, Tensor(s, std::move(keep))), mul(per_image_mean(x), Tensor(s, std::move(fill))));
                break;
            }
            default:
                break;
        }
    }
    return x;
}

}  // namespace distillforge
