#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "nbscan/harness.hpp"

namespace nbscan::harness {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 360;
constexpr int kLeft = 60;
constexpr int kRight = 20;
constexpr int kTop = 40;
constexpr int kBottom = 90;

std::string fixed(double v, int digits = 2) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string escape(const std::string& text) {
    std::string out;
    for (char c : text) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

double y_of(double v) {
    const double plot = kHeight - kTop - kBottom;
    return kTop + plot * (1.0 - std::clamp(v, 0.0, 1.0));
}

void header(std::ostringstream& s, const std::string& title) {
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double v = t / 4.0;
        s << "<line x1=\"" << kLeft << "\" x2=\"" << kWidth - kRight << "\" y1=\"" << fixed(y_of(v)) << "\" y2=\""
          << fixed(y_of(v)) << "\" stroke=\"#ddd\"/>\n"
          << "<text x=\"" << kLeft - 6 << "\" y=\"" << fixed(y_of(v) + 4) << "\" text-anchor=\"end\">" << fixed(v)
          << "</text>\n";
    }
    s << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft << "\" y1=\"" << kTop << "\" y2=\"" << kHeight - kBottom
      << "\" stroke=\"black\"/>\n";
}

void label(std::ostringstream& s, double x, const std::string& text) {
    s << "<text transform=\"translate(" << fixed(x) << "," << kHeight - kBottom + 12
      << ") rotate(35)\" text-anchor=\"start\">" << escape(text) << "</text>\n";
}

double quantile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const auto hi = std::min(sorted.size() - 1, lo + 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

std::string bar_chart_svg(const std::string& title, const std::vector<BarSeries>& bars) {
    std::ostringstream s;
    header(s, title);
    const double slot = static_cast<double>(kWidth - kLeft - kRight) / std::max<size_t>(1, bars.size());
    for (size_t i = 0; i < bars.size(); ++i) {
        const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
        const double top = y_of(bars[i].value);
        s << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(top) << "\" width=\"" << fixed(slot * 0.7)
          << "\" height=\"" << fixed(y_of(0.0) - top) << "\" fill=\"#4c72b0\"/>\n"
          << "<text x=\"" << fixed(x + slot * 0.35) << "\" y=\"" << fixed(top - 3) << "\" text-anchor=\"middle\">"
          << fixed(bars[i].value) << "</text>\n";
        label(s, x + slot * 0.2, bars[i].label);
    }
    s << "</svg>\n";
    return s.str();
}

std::string box_plot_svg(const std::string& title,
                         const std::vector<std::pair<std::string, std::vector<double>>>& groups) {
    std::ostringstream s;
    header(s, title);
    const double slot = static_cast<double>(kWidth - kLeft - kRight) / std::max<size_t>(1, groups.size());
    for (size_t i = 0; i < groups.size(); ++i) {
        auto values = groups[i].second;
        std::sort(values.begin(), values.end());
        const double cx = kLeft + slot * (static_cast<double>(i) + 0.5);
        const double half = slot * 0.25;
        if (!values.empty()) {
            const double lo = values.front(), hi = values.back();
            const double q1 = quantile(values, 0.25), med = quantile(values, 0.5), q3 = quantile(values, 0.75);
            s << "<line x1=\"" << fixed(cx) << "\" x2=\"" << fixed(cx) << "\" y1=\"" << fixed(y_of(lo)) << "\" y2=\""
              << fixed(y_of(hi)) << "\" stroke=\"black\"/>\n"
              << "<rect x=\"" << fixed(cx - half) << "\" y=\"" << fixed(y_of(q3)) << "\" width=\"" << fixed(2 * half)
              << "\" height=\"" << fixed(y_of(q1) - y_of(q3)) << "\" fill=\"#dd8452\" stroke=\"black\"/>\n"
              << "<line x1=\"" << fixed(cx - half) << "\" x2=\"" << fixed(cx + half) << "\" y1=\"" << fixed(y_of(med))
              << "\" y2=\"" << fixed(y_of(med)) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
        }
        label(s, cx - half, groups[i].first + " (n=" + std::to_string(values.size()) + ")");
    }
    s << "</svg>\n";
    return s.str();
}

std::string matrix_svg(const std::string& title, const TransferMatrix& matrix) {
    const int cell = 48;
    const int left = 260, top = 50;
    const int width = left + cell * static_cast<int>(matrix.models.size()) + 20;
    const int height = top + cell * static_cast<int>(matrix.triggers.size()) + 100;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
      << "</text>\n";
    for (size_t i = 0; i < matrix.triggers.size(); ++i) {
        const int y = top + cell * static_cast<int>(i);
        s << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
          << escape(matrix.triggers[i]) << "</text>\n";
        for (size_t j = 0; j < matrix.models.size(); ++j) {
            const double v = std::clamp(matrix.asr[i][j], 0.0, 1.0);
            const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
            const int x = left + cell * static_cast<int>(j);
            s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
              << "\" fill=\"rgb(255," << shade << "," << shade << ")\" stroke=\""
              << (matrix.source[i][j] ? "black" : "#bbb") << "\" stroke-width=\"" << (matrix.source[i][j] ? 2 : 1)
              << "\"/>\n"
              << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\">"
              << fixed(v) << "</text>\n";
        }
    }
    const int base = top + cell * static_cast<int>(matrix.triggers.size());
    for (size_t j = 0; j < matrix.models.size(); ++j)
        s << "<text transform=\"translate(" << left + cell * static_cast<int>(j) + cell / 3 << "," << base + 12
          << ") rotate(35)\">" << escape(matrix.models[j]) << "</text>\n";
    s << "</svg>\n";
    return s.str();
}

}  // namespace nbscan::harness
