#include "distillforge/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <unistd.h>

#include "distillforge/envelope.hpp"

namespace fs = std::filesystem;

namespace distillforge {

namespace {

std::string fmt(double v, const char* spec = "%.4g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

/// Minimal line/scatter/bar chart on fixed axes.
class Chart {
public:
    Chart(std::string title, std::string xlabel, std::string ylabel)
        : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)) {}

    void range(double x0, double x1, double y0, double y1) {
        if (!(x1 > x0)) x1 = x0 + 1.0;
        if (!(y1 > y0)) y1 = y0 + 1.0;
        x0_ = x0, x1_ = x1, y0_ = y0, y1_ = y1;
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color) {
        if (pts.empty()) return;
        body_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : pts) body_ << fmt(px(x), "%.2f") << ',' << fmt(py(y), "%.2f") << ' ';
        body_ << "\"/>\n";
    }

    void point(double x, double y, double err, const std::string& color) {
        if (err > 0)
            body_ << "<line x1=\"" << fmt(px(x), "%.2f") << "\" x2=\"" << fmt(px(x), "%.2f") << "\" y1=\""
                  << fmt(py(y - err), "%.2f") << "\" y2=\"" << fmt(py(y + err), "%.2f") << "\" stroke=\"" << color
                  << "\"/>\n";
        body_ << "<circle cx=\"" << fmt(px(x), "%.2f") << "\" cy=\"" << fmt(py(y), "%.2f") << "\" r=\"3.5\" fill=\""
              << color << "\"/>\n";
    }

    void bar(double x0, double x1, double h, const std::string& color) {
        body_ << "<rect x=\"" << fmt(px(x0), "%.2f") << "\" y=\"" << fmt(py(h), "%.2f") << "\" width=\""
              << fmt(std::max(0.0, px(x1) - px(x0) - 1), "%.2f") << "\" height=\"" << fmt(py(y0_) - py(h), "%.2f")
              << "\" fill=\"" << color << "\"/>\n";
    }

    void legend(std::size_t row, const std::string& label, const std::string& color) {
        const double y = kTop + 14 + 16 * static_cast<double>(row);
        body_ << "<rect x=\"" << kW - kRight - 120 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
              << color << "\"/><text x=\"" << kW - kRight - 105 << "\" y=\"" << y << "\" font-size=\"11\">" << label
              << "</text>\n";
    }

    std::string svg() const {
        std::ostringstream s;
        s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
          << "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        s << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title_ << "</text>\n";
        s << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\""
          << kH - kBottom << "\" stroke=\"black\"/>\n";
        s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
          << "\" stroke=\"black\"/>\n";
        for (int t = 0; t <= 4; ++t) {
            const double fx = x0_ + (x1_ - x0_) * t / 4.0, fy = y0_ + (y1_ - y0_) * t / 4.0;
            s << "<text x=\"" << fmt(px(fx), "%.2f") << "\" y=\"" << kH - kBottom + 16
              << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt(fx) << "</text>\n";
            s << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(py(fy) + 4, "%.2f")
              << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(fy) << "</text>\n";
        }
        s << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 8
          << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel_ << "</text>\n";
        s << "<text transform=\"translate(14," << (kTop + kH - kBottom) / 2
          << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"12\">" << ylabel_ << "</text>\n";
        s << body_.str() << "</svg>\n";
        return s.str();
    }

private:
    static constexpr int kW = 640, kH = 400, kLeft = 64, kRight = 20, kTop = 32, kBottom = 48;
    double px(double x) const { return kLeft + (x - x0_) / (x1_ - x0_) * (kW - kLeft - kRight); }
    double py(double y) const { return kH - kBottom - (y - y0_) / (y1_ - y0_) * (kH - kTop - kBottom); }

    std::string title_, xlabel_, ylabel_;
    double x0_ = 0, x1_ = 1, y0_ = 0, y1_ = 1;
    std::ostringstream body_;
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

std::string loss_svg(const std::vector<LogRow>& log) {
    Chart c("Match loss", "outer step", "loss");
    std::vector<std::pair<double, double>> pts;
    double hi = 0;
    for (const auto& r : log) {
        pts.emplace_back(static_cast<double>(r.step), r.loss);
        hi = std::max(hi, r.loss);
    }
    c.range(0, log.empty() ? 1.0 : static_cast<double>(log.back().step), 0, hi * 1.05);
    c.polyline(pts, kPalette[0]);
    return c.svg();
}

std::string accuracy_svg(const std::vector<EvalReport>& reports) {
    Chart c("Test accuracy vs images per class", "images per class", "accuracy");
    double xmax = 1;
    for (const auto& r : reports)
        if (r.kind != "full") xmax = std::max(xmax, static_cast<double>(r.ipc));
    c.range(0, xmax + 1, 0, 1);
    std::map<std::string, std::size_t> kinds;
    for (const auto& r : reports) {
        if (!kinds.contains(r.kind)) {
            const std::size_t k = kinds.size();
            kinds[r.kind] = k;
            c.legend(k, r.kind, kPalette[k % 5]);
        }
        if (r.succeeded() == 0) continue;
        const double x = r.kind == "full" ? xmax + 0.5 : static_cast<double>(r.ipc);
        c.point(x, r.mean, r.std, kPalette[kinds[r.kind] % 5]);
    }
    return c.svg();
}

std::string audit_svg(const std::optional<AuditReport>& audit) {
    Chart c("Nearest-real distance of distilled images", "RMS pixel distance", "images");
    if (!audit) {
        c.range(0, 1, 0, 1);
        return c.svg();
    }
    const auto& h = audit->histogram;
    const double top = static_cast<double>(*std::max_element(h.begin(), h.end()));
    c.range(0, audit->bin_edges.back(), 0, std::max(1.0, top));
    for (std::size_t b = 0; b < h.size(); ++b)
        c.bar(audit->bin_edges[b], audit->bin_edges[b + 1], static_cast<double>(h[b]), kPalette[0]);
    return c.svg();
}

}  // namespace

std::string accuracy_csv(const std::vector<EvalReport>& reports) {
    std::string out = "ipc,kind,mean,std,seeds,failed\n";
    for (const auto& r : reports)
        out += std::to_string(r.ipc) + "," + r.kind + "," + (r.succeeded() ? fmt(r.mean, "%.6f") : "") + "," +
               fmt(r.std, "%.6f") + "," + std::to_string(r.seeds.size()) + "," +
               std::to_string(r.seeds.size() - r.succeeded()) + "\n";
    return out;
}

Image8 distilled_grid(const DistilledDataset& dc) {
    const Tensor px = dc.export_pixels();
    const auto& s = px.shape();
    const std::size_t c = s[1], h = s[2], w = s[3];
    Image8 img;
    img.channels = c == 3 ? 3 : 1;
    img.width = dc.ipc * w;
    img.height = dc.classes() * h;
    img.pixels.assign(img.width * img.height * img.channels, 0);
    const auto v = px.values();
    for (std::size_t i = 0; i < dc.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(dc.labels[i]), col = i % dc.ipc;
        for (std::size_t ch = 0; ch < img.channels; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const double p = v[((i * c + ch) * h + y) * w + x];
                    img.pixels[((row * h + y) * img.width + col * w + x) * img.channels + ch] =
                        static_cast<std::uint8_t>(std::lround(p * 255.0));
                }
    }
    return img;
}

std::vector<LogRow> parse_log(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    if (line != "step,loss,alpha,eval_acc") throw FormatError("loss log: unexpected header '" + line + "'");
    std::vector<LogRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        LogRow r;
        std::istringstream f(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(f, cell, ',')) cells.push_back(cell);
        if (cells.size() < 3) throw FormatError("loss log: malformed row '" + line + "'");
        r.step = std::stoul(cells[0]);
        r.loss = std::stod(cells[1]);
        r.alpha = std::stod(cells[2]);
        if (cells.size() > 3 && !cells[3].empty()) r.eval_accuracy = std::stod(cells[3]);
        rows.push_back(r);
    }
    return rows;
}

std::vector<fs::path> emit_plots(const fs::path& dir, const PlotInputs& in) {
    fs::create_directories(dir);
    std::vector<fs::path> out;
    auto text = [&](const char* name, const std::string& body) {
        write_atomic(dir / name, body);
        out.push_back(dir / name);
    };
    text("loss_curve.svg", loss_svg(in.log));
    text("accuracy_vs_ipc.csv", accuracy_csv(in.reports));
    text("accuracy_vs_ipc.svg", accuracy_svg(in.reports));
    text("audit_hist.svg", audit_svg(in.audit));
    if (in.distilled) {
        fs::path tmp = dir / "distilled_grid.png";
        tmp += ".tmp-" + std::to_string(::getpid());
        write_png(tmp, distilled_grid(*in.distilled));
        fs::rename(tmp, dir / "distilled_grid.png");
        out.push_back(dir / "distilled_grid.png");
    }
    return out;
}

}  // namespace distillforge
