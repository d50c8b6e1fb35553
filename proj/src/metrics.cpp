#include "despeckle/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <boost/math/special_functions/gamma.hpp>
#include <json.hpp>

#include "despeckle/errors.hpp"
#include "despeckle/image_io.hpp"

namespace despeckle {

namespace fs = std::filesystem;

namespace {

std::string num(double v)
{
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::string psnr_text(double v) { return v >= kPsnrCap ? "inf" : num(v); }

// Minimal SVG chart: a plot area with linear axes in data units.
class Chart {
public:
    Chart(std::string title, std::string xlabel, std::string ylabel, double x0, double x1,
          double y0, double y1)
        : x0_(x0), x1_(x1 > x0 ? x1 : x0 + 1.0), y0_(y0), y1_(y1 > y0 ? y1 : y0 + 1.0)
    {
        out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
             << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
             << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
             << text(kW / 2.0, 20, title, "middle", 14)
             << text(kW / 2.0, kH - 8, xlabel, "middle")
             << "<text transform=\"translate(16," << kH / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
             << escape(ylabel) << "</text>\n"
             << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << kW - kL - kR
             << "\" height=\"" << kH - kT - kB << "\" fill=\"none\" stroke=\"black\"/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double xv = x0_ + (x1_ - x0_) * i / 4.0, yv = y0_ + (y1_ - y0_) * i / 4.0;
            out_ << text(px(xv), kH - kB + 16, tick(xv), "middle")
                 << text(kL - 6, py(yv) + 4, tick(yv), "end");
        }
    }

    void line(const std::vector<std::pair<double, double>>& pts, const std::string& colour,
              const std::string& label, bool markers = true)
    {
        if (pts.empty())
            return;
        out_ << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : pts)
            out_ << px(x) << ',' << py(y) << ' ';
        out_ << "\"/>\n";
        if (markers)
            for (const auto& [x, y] : pts)
                out_ << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\""
                     << colour << "\"/>\n";
        legend(colour, label);
    }

    void bar(double x_left, double x_right, double height, const std::string& colour)
    {
        const double top = py(std::min(height, y1_)), base = py(std::max(y0_, 0.0));
        out_ << "<rect x=\"" << px(x_left) << "\" y=\"" << top << "\" width=\""
             << std::max(0.0, px(x_right) - px(x_left)) << "\" height=\"" << std::max(0.0, base - top)
             << "\" fill=\"" << colour << "\"/>\n";
    }

    void label_at(double x, const std::string& s)
    {
        out_ << text(px(x), kH - kB + 30, s, "middle", 10);
    }

    void legend(const std::string& colour, const std::string& label)
    {
        if (label.empty())
            return;
        const double y = kT + 14 + 16 * legends_++;
        out_ << "<rect x=\"" << kW - kR - 150 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
             << colour << "\"/>\n"
             << text(kW - kR - 135, y, label, "start");
    }

    std::string str() const { return out_.str() + "</svg>\n"; }

private:
    static constexpr double kW = 640, kH = 400, kL = 70, kR = 20, kT = 34, kB = 56;

    double px(double x) const { return kL + (x - x0_) / (x1_ - x0_) * (kW - kL - kR); }
    double py(double y) const { return kH - kB - (y - y0_) / (y1_ - y0_) * (kH - kT - kB); }

    static std::string tick(double v)
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3g", v);
        return buf;
    }
    static std::string escape(const std::string& s)
    {
        std::string out;
        for (char c : s) {
            if (c == '<') out += "&lt;";
            else if (c == '>') out += "&gt;";
            else if (c == '&') out += "&amp;";
            else out += c;
        }
        return out;
    }
    static std::string text(double x, double y, const std::string& s, const char* anchor,
                            int size = 12)
    {
        std::ostringstream o;
        o << "<text x=\"" << x << "\" y=\"" << y << "\" text-anchor=\"" << anchor
          << "\" font-size=\"" << size << "\">" << escape(s) << "</text>\n";
        return o.str();
    }

    double x0_, x1_, y0_, y1_;
    int legends_ = 0;
    std::ostringstream out_;
};

std::string training_svg(const std::vector<EpochRecord>& log)
{
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::vector<std::pair<double, double>> tr, va;
    for (const auto& r : log) {
        tr.emplace_back(r.epoch, r.train_nll);
        lo = std::min(lo, r.train_nll);
        hi = std::max(hi, r.train_nll);
        if (r.val_nll) {
            va.emplace_back(r.epoch, *r.val_nll);
            lo = std::min(lo, *r.val_nll);
            hi = std::max(hi, *r.val_nll);
        }
    }
    const double pad = 0.05 * std::max(hi - lo, 1e-6);
    Chart chart("Training curve", "epoch", "mean NLL", log.front().epoch,
                std::max(log.back().epoch, log.front().epoch + 1), lo - pad, hi + pad);
    chart.line(tr, "#1f77b4", "train");
    chart.line(va, "#d62728", "validation");
    return chart.str();
}

std::string psnr_svg(const std::vector<ImageMetrics>& images)
{
    double hi = 0.0;
    for (const auto& m : images) {
        if (m.psnr)
            hi = std::max(hi, std::min(*m.psnr, 60.0));
        if (m.psnr_noisy)
            hi = std::max(hi, std::min(*m.psnr_noisy, 60.0));
    }
    const double n = static_cast<double>(images.size());
    Chart chart("PSNR per image", "image", "PSNR (dB)", 0.0, n, 0.0, std::ceil(hi / 5.0) * 5.0 + 5.0);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& m = images[i];
        const double x = static_cast<double>(i);
        if (m.psnr_noisy)
            chart.bar(x + 0.1, x + 0.45, *m.psnr_noisy, "#aaaaaa");
        if (m.psnr)
            chart.bar(x + 0.5, x + 0.9, *m.psnr, "#2ca02c");
        chart.label_at(x + 0.5, m.name);
    }
    chart.legend("#aaaaaa", "noisy");
    chart.legend("#2ca02c", "despeckled");
    return chart.str();
}

std::string ratio_svg(const Histogram& hist, LookCount looks)
{
    const int bins = static_cast<int>(hist.density.size());
    const double width = (hist.hi - hist.lo) / bins;
    double top = 0.0;
    std::vector<std::pair<double, double>> ideal;
    for (int k = 0; k <= 200; ++k) {
        const double r = hist.lo + (hist.hi - hist.lo) * k / 200.0;
        const double d = speckle_density(std::max(r, 1e-3), looks);
        ideal.emplace_back(r, d);
    }
    for (double d : hist.density)
        top = std::max(top, d);
    for (const auto& p : ideal)
        top = std::max(top, p.second);
    top = std::min(top * 1.1, 5.0);
    for (auto& p : ideal)
        p.second = std::min(p.second, top);
    Chart chart("Ratio image histogram", "noisy / despeckled", "density", hist.lo, hist.hi, 0.0, top);
    for (int b = 0; b < bins; ++b)
        chart.bar(hist.lo + b * width, hist.lo + (b + 1) * width, hist.density[b], "#9ecae1");
    chart.legend("#9ecae1", "observed");
    chart.line(ideal, "#d62728", "Gamma(L, L)", false);
    return chart.str();
}

} // namespace

double psnr(const IntensityImage& clean, const IntensityImage& estimate, double peak)
{
    require_same_shape(clean, estimate, "psnr");
    if (!(peak > 0.0))
        throw std::invalid_argument("PSNR peak must be > 0");
    long double se = 0.0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const long double d = static_cast<long double>(clean[i]) - estimate[i];
        se += d * d;
    }
    const double mse = static_cast<double>(se / clean.size());
    if (mse == 0.0)
        return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

EnlResult enl(const IntensityImage& img, const RegionMask& mask)
{
    require_same_shape(img, mask, "enl mask");
    long double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < img.size(); ++i)
        if (mask[i]) {
            s += img[i];
            ++n;
        }
    if (n < kMinMaskPixels)
        throw std::invalid_argument("ENL region has " + std::to_string(n) + " pixels, need at least " +
                                    std::to_string(kMinMaskPixels));
    const long double mean = s / n;
    long double ss = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i)
        if (mask[i]) {
            const long double d = img[i] - mean;
            ss += d * d;
        }
    const long double var = ss / n;
    if (var == 0.0L)
        return {std::numeric_limits<double>::infinity(), true};
    return {static_cast<double>(mean * mean / var), false};
}

RatioMoments ratio_moments(const std::vector<IntensityImage>& noisy,
                           const std::vector<IntensityImage>& estimates)
{
    if (noisy.size() != estimates.size() || noisy.empty())
        throw std::invalid_argument("ratio moments need matching, non-empty image lists");
    long double s = 0.0, ss = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < noisy.size(); ++k) {
        require_same_shape(noisy[k], estimates[k], "ratio image");
        for (std::size_t i = 0; i < noisy[k].size(); ++i) {
            const double e = estimates[k][i];
            if (!(e > 0.0))
                throw std::domain_error("ratio image needs a strictly positive estimate");
            const long double r = noisy[k][i] / e;
            s += r;
            ss += r * r;
        }
        n += noisy[k].size();
    }
    const long double mean = s / n;
    long double var = 0.0;
    for (std::size_t k = 0; k < noisy.size(); ++k)
        for (std::size_t i = 0; i < noisy[k].size(); ++i) {
            const long double d = noisy[k][i] / estimates[k][i] - mean;
            var += d * d;
        }
    return {static_cast<double>(mean), static_cast<double>(std::sqrt(var / n))};
}

RatioMoments ratio_moments(const IntensityImage& noisy, const IntensityImage& estimate)
{
    return ratio_moments(std::vector<IntensityImage>{noisy}, std::vector<IntensityImage>{estimate});
}

Histogram ratio_histogram(const std::vector<IntensityImage>& noisy,
                          const std::vector<IntensityImage>& estimates, double lo, double hi,
                          int bins)
{
    if (!(hi > lo) || bins < 1)
        throw std::invalid_argument("histogram needs hi > lo and at least one bin");
    Histogram h{lo, hi, std::vector<double>(static_cast<std::size_t>(bins), 0.0)};
    std::size_t n = 0;
    const double width = (hi - lo) / bins;
    for (std::size_t k = 0; k < noisy.size(); ++k)
        for (std::size_t i = 0; i < noisy[k].size(); ++i) {
            const double r = noisy[k][i] / estimates[k][i];
            ++n;
            if (r >= lo && r < hi)
                h.density[static_cast<std::size_t>((r - lo) / width)] += 1.0;
        }
    for (auto& d : h.density)
        d /= static_cast<double>(n) * width;
    return h;
}

double speckle_density(double r, LookCount looks)
{
    if (r <= 0.0)
        return 0.0;
    const double L = looks.real();
    return std::exp(L * std::log(L) + (L - 1.0) * std::log(r) - L * r - boost::math::lgamma(L));
}

ImageMetrics evaluate_image(const std::string& name, const IntensityImage& noisy,
                            const IntensityImage& estimate, const IntensityImage* clean,
                            const RegionMask* mask, double peak)
{
    ImageMetrics m;
    m.name = name;
    if (clean) {
        m.psnr_noisy = psnr(*clean, noisy, peak);
        m.psnr = psnr(*clean, estimate, peak);
    }
    if (mask) {
        m.enl_noisy = enl(noisy, *mask);
        m.enl = enl(estimate, *mask);
    }
    m.ratio = ratio_moments(noisy, estimate);
    return m;
}

std::string metrics_csv(const MetricsReport& report)
{
    const bool any_psnr = std::any_of(report.images.begin(), report.images.end(),
                                      [](const ImageMetrics& m) { return m.psnr.has_value(); });
    const bool any_enl = std::any_of(report.images.begin(), report.images.end(),
                                     [](const ImageMetrics& m) { return m.enl.has_value(); });
    std::ostringstream out;
    out << "# despeckle-metrics v1\n";
    out << "image";
    if (any_psnr)
        out << ",psnr_noisy_db,psnr_db";
    if (any_enl)
        out << ",enl_noisy,enl,enl_degenerate";
    out << ",ratio_mean,ratio_std\n";
    for (const auto& m : report.images) {
        out << m.name;
        if (any_psnr)
            out << ',' << (m.psnr_noisy ? psnr_text(*m.psnr_noisy) : "") << ','
                << (m.psnr ? psnr_text(*m.psnr) : "");
        if (any_enl) {
            if (m.enl)
                out << ',' << num(m.enl_noisy->value) << ',' << num(m.enl->value) << ','
                    << (m.enl->degenerate || m.enl_noisy->degenerate ? 1 : 0);
            else
                out << ",,,";
        }
        out << ',' << num(m.ratio.mean) << ',' << num(m.ratio.stddev) << '\n';
    }
    return out.str();
}

std::vector<fs::path> emit_report(const MetricsReport& report, const fs::path& out_dir)
{
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec)
        throw DataError("cannot create report directory " + out_dir.string() + ": " + ec.message());
    std::vector<fs::path> written;
    auto put = [&](const std::string& name, const std::string& bytes) {
        write_file_atomic(out_dir / name, bytes);
        written.push_back(out_dir / name);
    };
    put("metrics.csv", metrics_csv(report));

    nlohmann::json meta = nlohmann::json::object();
    for (const auto& [k, v] : report.metadata)
        meta[k] = v;
    meta["csv_schema"] = "despeckle-metrics v1";
    meta["looks"] = report.looks;
    meta["psnr_peak"] = report.peak;
    meta["ratio_mean"] = report.global_ratio.mean;
    meta["ratio_std"] = report.global_ratio.stddev;
    meta["images"] = report.images.size();
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    meta["generated_at"] = stamp;
    put("report_meta.json", meta.dump(2) + "\n");

    if (!report.training.empty())
        put("training_curve.svg", training_svg(report.training));
    if (std::any_of(report.images.begin(), report.images.end(),
                    [](const ImageMetrics& m) { return m.psnr.has_value(); }))
        put("psnr.svg", psnr_svg(report.images));
    if (!report.ratio_hist.density.empty())
        put("ratio_histogram.svg", ratio_svg(report.ratio_hist, LookCount(report.looks)));
    return written;
}

} // namespace despeckle
