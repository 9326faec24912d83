#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fedleak/image_io.hpp"

// Minimal chart rendering: line charts with confidence bands, optional second
// dotted series, and value-colored scatter plots. Every chart is emitted both
// as SVG (text) and PNG (rasterized with a 5x7 bitmap font).

namespace fedleak::plot {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> lo;  // optional band
    std::vector<double> hi;
    std::string color = "#1f77b4";
    bool dotted = false;
};

struct ScatterPoint {
    double x = 0.0;
    double y = 0.0;
    double value = 0.0;  // mapped through the colormap
    bool ring = false;   // outlined marker (e.g., originals vs reconstructions)
};

struct Chart {
    std::string title;
    std::string xlabel;
    std::string ylabel;
    std::vector<Series> series;
    std::vector<ScatterPoint> scatter;
    std::string scatter_value_label;
    int width = 640;
    int height = 420;
};

namespace detail {

struct Rgb {
    unsigned char r = 0, g = 0, b = 0;
};

inline Rgb parse_color(const std::string& hex) {
    if (hex.size() != 7 || hex[0] != '#') return {31, 119, 180};
    auto byte = [&](int i) { return static_cast<unsigned char>(std::stoi(hex.substr(static_cast<std::size_t>(i), 2), nullptr, 16)); };
    return {byte(1), byte(3), byte(5)};
}

inline Rgb viridis(double t) {
    static const double stops[5][3] = {{0.267, 0.005, 0.329},
                                       {0.229, 0.322, 0.546},
                                       {0.128, 0.567, 0.551},
                                       {0.369, 0.789, 0.383},
                                       {0.993, 0.906, 0.144}};
    t = std::clamp(t, 0.0, 1.0) * 4.0;
    const int i = std::min(3, static_cast<int>(t));
    const double f = t - i;
    Rgb c;
    c.r = static_cast<unsigned char>(255.0 * (stops[i][0] * (1 - f) + stops[i + 1][0] * f));
    c.g = static_cast<unsigned char>(255.0 * (stops[i][1] * (1 - f) + stops[i + 1][1] * f));
    c.b = static_cast<unsigned char>(255.0 * (stops[i][2] * (1 - f) + stops[i + 1][2] * f));
    return c;
}

// 5x7 glyphs, column-major bits (bit y set = pixel on at row y).
inline const std::uint8_t* glyph(char c) {
    static const struct {
        char ch;
        std::uint8_t col[5];
    } table[] = {
        {'0', {0x3e, 0x51, 0x49, 0x45, 0x3e}}, {'1', {0x00, 0x42, 0x7f, 0x40, 0x00}},
        {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4b, 0x31}},
        {'4', {0x18, 0x14, 0x12, 0x7f, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
        {'6', {0x3c, 0x4a, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
        {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1e}},
        {'A', {0x7e, 0x11, 0x11, 0x11, 0x7e}}, {'B', {0x7f, 0x49, 0x49, 0x49, 0x36}},
        {'C', {0x3e, 0x41, 0x41, 0x41, 0x22}}, {'D', {0x7f, 0x41, 0x41, 0x22, 0x1c}},
        {'E', {0x7f, 0x49, 0x49, 0x49, 0x41}}, {'F', {0x7f, 0x09, 0x09, 0x09, 0x01}},
        {'G', {0x3e, 0x41, 0x49, 0x49, 0x7a}}, {'H', {0x7f, 0x08, 0x08, 0x08, 0x7f}},
        {'I', {0x00, 0x41, 0x7f, 0x41, 0x00}}, {'J', {0x20, 0x40, 0x41, 0x3f, 0x01}},
        {'K', {0x7f, 0x08, 0x14, 0x22, 0x41}}, {'L', {0x7f, 0x40, 0x40, 0x40, 0x40}},
        {'M', {0x7f, 0x02, 0x0c, 0x02, 0x7f}}, {'N', {0x7f, 0x04, 0x08, 0x10, 0x7f}},
        {'O', {0x3e, 0x41, 0x41, 0x41, 0x3e}}, {'P', {0x7f, 0x09, 0x09, 0x09, 0x06}},
        {'Q', {0x3e, 0x41, 0x51, 0x21, 0x5e}}, {'R', {0x7f, 0x09, 0x19, 0x29, 0x46}},
        {'S', {0x46, 0x49, 0x49, 0x49, 0x31}}, {'T', {0x01, 0x01, 0x7f, 0x01, 0x01}},
        {'U', {0x3f, 0x40, 0x40, 0x40, 0x3f}}, {'V', {0x1f, 0x20, 0x40, 0x20, 0x1f}},
        {'W', {0x3f, 0x40, 0x38, 0x40, 0x3f}}, {'X', {0x63, 0x14, 0x08, 0x14, 0x63}},
        {'Y', {0x07, 0x08, 0x70, 0x08, 0x07}}, {'Z', {0x61, 0x51, 0x49, 0x45, 0x43}},
        {'.', {0x00, 0x60, 0x60, 0x00, 0x00}}, {',', {0x00, 0x80, 0x60, 0x00, 0x00}},
        {'-', {0x08, 0x08, 0x08, 0x08, 0x08}}, {'+', {0x08, 0x08, 0x3e, 0x08, 0x08}},
        {'=', {0x14, 0x14, 0x14, 0x14, 0x14}}, {'_', {0x40, 0x40, 0x40, 0x40, 0x40}},
        {'(', {0x00, 0x1c, 0x22, 0x41, 0x00}}, {')', {0x00, 0x41, 0x22, 0x1c, 0x00}},
        {'/', {0x20, 0x10, 0x08, 0x04, 0x02}}, {'%', {0x23, 0x13, 0x08, 0x64, 0x62}},
        {':', {0x00, 0x36, 0x36, 0x00, 0x00}}, {' ', {0x00, 0x00, 0x00, 0x00, 0x00}},
    };
    const char up = c >= 'a' && c <= 'z' ? static_cast<char>(c - 'a' + 'A') : c;
    for (const auto& e : table)
        if (e.ch == up) return e.col;
    return table[sizeof(table) / sizeof(table[0]) - 1].col;  // space
}

class Raster {
public:
    Raster(int w, int h) : w_(w), h_(h), pixels_(static_cast<std::size_t>(w) * h * 3, 255) {}

    void set(int x, int y, Rgb c, double alpha = 1.0) {
        if (x < 0 || x >= w_ || y < 0 || y >= h_) return;
        auto* p = &pixels_[(static_cast<std::size_t>(y) * w_ + x) * 3];
        p[0] = static_cast<unsigned char>(p[0] * (1 - alpha) + c.r * alpha);
        p[1] = static_cast<unsigned char>(p[1] * (1 - alpha) + c.g * alpha);
        p[2] = static_cast<unsigned char>(p[2] * (1 - alpha) + c.b * alpha);
    }

    void line(double x0, double y0, double x1, double y1, Rgb c, bool dotted = false) {
        const double len = std::hypot(x1 - x0, y1 - y0);
        const int steps = std::max(1, static_cast<int>(len * 2));
        for (int i = 0; i <= steps; ++i) {
            if (dotted && (i / 6) % 2 == 1) continue;
            const double t = static_cast<double>(i) / steps;
            const double x = x0 + (x1 - x0) * t;
            const double y = y0 + (y1 - y0) * t;
            set(static_cast<int>(x), static_cast<int>(y), c);
            set(static_cast<int>(x) + 1, static_cast<int>(y), c, 0.5);
            set(static_cast<int>(x), static_cast<int>(y) + 1, c, 0.5);
        }
    }

    void disc(double cx, double cy, double r, Rgb c, bool ring = false) {
        for (int y = static_cast<int>(cy - r) - 1; y <= static_cast<int>(cy + r) + 1; ++y)
            for (int x = static_cast<int>(cx - r) - 1; x <= static_cast<int>(cx + r) + 1; ++x) {
                const double d = std::hypot(x - cx, y - cy);
                if (ring ? std::abs(d - r) < 0.9 : d <= r) set(x, y, c);
            }
    }

    void text(int x, int y, const std::string& s, Rgb c) {
        for (char ch : s) {
            const std::uint8_t* col = glyph(ch);
            for (int cx = 0; cx < 5; ++cx)
                for (int cy = 0; cy < 7; ++cy)
                    if (col[cx] & (1 << cy)) set(x + cx, y + cy, c);
            x += 6;
        }
    }

    void vspan(int x, double y0, double y1, Rgb c, double alpha) {
        if (y0 > y1) std::swap(y0, y1);
        for (int y = static_cast<int>(y0); y <= static_cast<int>(y1); ++y) set(x, y, c, alpha);
    }

    img::RawImage image() const {
        img::RawImage im;
        im.width = w_;
        im.height = h_;
        im.channels = 3;
        im.pixels = pixels_;
        return im;
    }

private:
    int w_, h_;
    std::vector<unsigned char> pixels_;
};

struct Extent {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
};

inline Extent compute_extent(const Chart& chart) {
    Extent e{1e300, -1e300, 1e300, -1e300};
    auto feed = [&](double x, double y) {
        e.xmin = std::min(e.xmin, x);
        e.xmax = std::max(e.xmax, x);
        e.ymin = std::min(e.ymin, y);
        e.ymax = std::max(e.ymax, y);
    };
    for (const auto& s : chart.series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            feed(s.x[i], s.y[i]);
            if (i < s.lo.size()) feed(s.x[i], s.lo[i]);
            if (i < s.hi.size()) feed(s.x[i], s.hi[i]);
        }
    for (const auto& p : chart.scatter) feed(p.x, p.y);
    if (e.xmin > e.xmax) e = {0, 1, 0, 1};
    if (e.xmin == e.xmax) {
        e.xmin -= 0.5;
        e.xmax += 0.5;
    }
    if (e.ymin == e.ymax) {
        e.ymin -= 0.5;
        e.ymax += 0.5;
    }
    const double mx = 0.05 * (e.xmax - e.xmin), my = 0.08 * (e.ymax - e.ymin);
    return {e.xmin - mx, e.xmax + mx, e.ymin - my, e.ymax + my};
}

inline std::string fmt_num(double v) {
    std::ostringstream os;
    if (v != 0.0 && (std::abs(v) >= 1e4 || std::abs(v) < 1e-2))
        os << std::scientific << std::setprecision(1) << v;
    else
        os << std::fixed << std::setprecision(std::abs(v) < 10 ? 2 : 0) << v;
    return os.str();
}

inline std::vector<double> ticks(double lo, double hi, int target = 5) {
    const double range = hi - lo;
    const double raw = range / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double mult : {1.0, 2.0, 5.0, 10.0})
        if (raw <= mult * mag) {
            step = mult * mag;
            break;
        }
    std::vector<double> out;
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-12 * range; v += step) out.push_back(v);
    return out;
}

}  // namespace detail

inline void write_svg(const std::string& path, const Chart& chart) {
    const auto e = detail::compute_extent(chart);
    const int W = chart.width, H = chart.height;
    const int ml = 62, mr = 18, mt = 34, mb = 46;
    auto px = [&](double x) { return ml + (x - e.xmin) / (e.xmax - e.xmin) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - e.ymin) / (e.ymax - e.ymin) * (H - mt - mb); };

    std::ostringstream s;
    s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    s << "<rect width='100%' height='100%' fill='white'/>\n";
    s << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='14' font-family='sans-serif'>"
      << chart.title << "</text>\n";
    for (double t : detail::ticks(e.xmin, e.xmax)) {
        s << "<line x1='" << px(t) << "' y1='" << py(e.ymin) << "' x2='" << px(t) << "' y2='" << py(e.ymax)
          << "' stroke='#eeeeee'/>\n";
        s << "<text x='" << px(t) << "' y='" << H - mb + 16 << "' text-anchor='middle' font-size='10' font-family='sans-serif'>"
          << detail::fmt_num(t) << "</text>\n";
    }
    for (double t : detail::ticks(e.ymin, e.ymax)) {
        s << "<line x1='" << px(e.xmin) << "' y1='" << py(t) << "' x2='" << px(e.xmax) << "' y2='" << py(t)
          << "' stroke='#eeeeee'/>\n";
        s << "<text x='" << ml - 6 << "' y='" << py(t) + 3 << "' text-anchor='end' font-size='10' font-family='sans-serif'>"
          << detail::fmt_num(t) << "</text>\n";
    }
    s << "<rect x='" << ml << "' y='" << mt << "' width='" << W - ml - mr << "' height='" << H - mt - mb
      << "' fill='none' stroke='#333333'/>\n";
    s << "<text x='" << W / 2 << "' y='" << H - 10 << "' text-anchor='middle' font-size='11' font-family='sans-serif'>"
      << chart.xlabel << "</text>\n";
    s << "<text x='14' y='" << H / 2 << "' transform='rotate(-90 14 " << H / 2
      << ")' text-anchor='middle' font-size='11' font-family='sans-serif'>" << chart.ylabel << "</text>\n";

    for (const auto& series : chart.series) {
        if (!series.lo.empty() && series.lo.size() == series.x.size() && series.hi.size() == series.x.size()) {
            s << "<path d='M";
            for (std::size_t i = 0; i < series.x.size(); ++i) s << px(series.x[i]) << ' ' << py(series.hi[i]) << ' ';
            for (std::size_t i = series.x.size(); i-- > 0;) s << px(series.x[i]) << ' ' << py(series.lo[i]) << ' ';
            s << "Z' fill='" << series.color << "' fill-opacity='0.18' stroke='none'/>\n";
        }
        s << "<polyline fill='none' stroke='" << series.color << "' stroke-width='1.6'";
        if (series.dotted) s << " stroke-dasharray='4 3'";
        s << " points='";
        for (std::size_t i = 0; i < series.x.size(); ++i) s << px(series.x[i]) << ',' << py(series.y[i]) << ' ';
        s << "'/>\n";
        for (std::size_t i = 0; i < series.x.size(); ++i)
            s << "<circle cx='" << px(series.x[i]) << "' cy='" << py(series.y[i]) << "' r='2.4' fill='" << series.color
              << "'/>\n";
    }
    double vmin = 1e300, vmax = -1e300;
    for (const auto& p : chart.scatter) {
        vmin = std::min(vmin, p.value);
        vmax = std::max(vmax, p.value);
    }
    for (const auto& p : chart.scatter) {
        const double t = vmax > vmin ? (p.value - vmin) / (vmax - vmin) : 0.5;
        const auto c = detail::viridis(t);
        s << "<circle cx='" << px(p.x) << "' cy='" << py(p.y) << "' r='3.4' ";
        char hex[8];
        std::snprintf(hex, sizeof(hex), "#%02x%02x%02x", c.r, c.g, c.b);
        if (p.ring)
            s << "fill='none' stroke='" << hex << "' stroke-width='1.6'";
        else
            s << "fill='" << hex << "'";
        s << "/>\n";
    }
    // legend
    int ly = mt + 8;
    for (const auto& series : chart.series) {
        s << "<line x1='" << W - mr - 130 << "' y1='" << ly << "' x2='" << W - mr - 106 << "' y2='" << ly
          << "' stroke='" << series.color << "' stroke-width='2'";
        if (series.dotted) s << " stroke-dasharray='4 3'";
        s << "/>\n<text x='" << W - mr - 100 << "' y='" << ly + 4
          << "' font-size='10' font-family='sans-serif'>" << series.label << "</text>\n";
        ly += 14;
    }
    s << "</svg>\n";

    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_svg: cannot open " + path);
    f << s.str();
}

inline void write_png(const std::string& path, const Chart& chart) {
    const auto e = detail::compute_extent(chart);
    const int W = chart.width, H = chart.height;
    const int ml = 62, mr = 18, mt = 34, mb = 46;
    auto px = [&](double x) { return ml + (x - e.xmin) / (e.xmax - e.xmin) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (y - e.ymin) / (e.ymax - e.ymin) * (H - mt - mb); };

    detail::Raster r(W, H);
    const detail::Rgb grid{230, 230, 230}, frame{60, 60, 60}, ink{20, 20, 20};
    for (double t : detail::ticks(e.xmin, e.xmax)) {
        r.line(px(t), py(e.ymin), px(t), py(e.ymax), grid);
        r.text(static_cast<int>(px(t)) - 8, H - mb + 8, detail::fmt_num(t), ink);
    }
    for (double t : detail::ticks(e.ymin, e.ymax)) {
        r.line(px(e.xmin), py(t), px(e.xmax), py(t), grid);
        const auto s = detail::fmt_num(t);
        r.text(ml - 8 - 6 * static_cast<int>(s.size()), static_cast<int>(py(t)) - 3, s, ink);
    }
    r.line(ml, mt, W - mr, mt, frame);
    r.line(ml, H - mb, W - mr, H - mb, frame);
    r.line(ml, mt, ml, H - mb, frame);
    r.line(W - mr, mt, W - mr, H - mb, frame);
    r.text(std::max(0, W / 2 - 3 * static_cast<int>(chart.title.size())), 12, chart.title, ink);
    r.text(std::max(0, W / 2 - 3 * static_cast<int>(chart.xlabel.size())), H - 16, chart.xlabel, ink);
    r.text(4, mt - 12, chart.ylabel, ink);

    for (const auto& series : chart.series) {
        const auto c = detail::parse_color(series.color);
        if (!series.lo.empty() && series.lo.size() == series.x.size() && series.hi.size() == series.x.size()) {
            for (std::size_t i = 0; i + 1 < series.x.size(); ++i) {
                const int x0 = static_cast<int>(px(series.x[i]));
                const int x1 = static_cast<int>(px(series.x[i + 1]));
                for (int x = x0; x <= x1; ++x) {
                    const double t = x1 > x0 ? static_cast<double>(x - x0) / (x1 - x0) : 0.0;
                    const double lo = series.lo[i] * (1 - t) + series.lo[i + 1] * t;
                    const double hi = series.hi[i] * (1 - t) + series.hi[i + 1] * t;
                    r.vspan(x, py(hi), py(lo), c, 0.18);
                }
            }
        }
        for (std::size_t i = 0; i + 1 < series.x.size(); ++i)
            r.line(px(series.x[i]), py(series.y[i]), px(series.x[i + 1]), py(series.y[i + 1]), c, series.dotted);
        for (std::size_t i = 0; i < series.x.size(); ++i) r.disc(px(series.x[i]), py(series.y[i]), 2.2, c);
    }
    double vmin = 1e300, vmax = -1e300;
    for (const auto& p : chart.scatter) {
        vmin = std::min(vmin, p.value);
        vmax = std::max(vmax, p.value);
    }
    for (const auto& p : chart.scatter) {
        const double t = vmax > vmin ? (p.value - vmin) / (vmax - vmin) : 0.5;
        r.disc(px(p.x), py(p.y), 3.2, detail::viridis(t), p.ring);
    }
    int ly = mt + 8;
    for (const auto& series : chart.series) {
        const auto c = detail::parse_color(series.color);
        r.line(W - mr - 130, ly, W - mr - 106, ly, c, series.dotted);
        r.text(W - mr - 100, ly - 3, series.label, ink);
        ly += 14;
    }
    img::write_png(path, r.image());
}

inline void write_both(const std::string& path_base, const Chart& chart) {
    write_svg(path_base + ".svg", chart);
    write_png(path_base + ".png", chart);
}

}  // namespace fedleak::plot
