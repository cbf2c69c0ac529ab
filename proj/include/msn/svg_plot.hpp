#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace msn {

// Minimal SVG line/marker chart, enough for the gap-statistics and training
// trend figures. One series per line; x is the sample index.
struct PlotSeries {
    std::string name;
    std::string color;
    std::vector<double> y;
};

inline void write_svg_chart(const std::filesystem::path& file, const std::string& title,
                            const std::string& x_label, const std::string& y_label,
                            const std::vector<PlotSeries>& series, bool log_y = false) {
    const int W = 820, H = 460, ml = 70, mr = 170, mt = 50, mb = 55;
    const int pw = W - ml - mr, ph = H - mt - mb;

    double ymin = 1e300, ymax = -1e300;
    std::size_t nmax = 0;
    for (const auto& s : series) {
        nmax = std::max(nmax, s.y.size());
        for (double v : s.y) {
            const double t = log_y ? std::log10(std::max(v, 1e-12)) : v;
            ymin = std::min(ymin, t);
            ymax = std::max(ymax, t);
        }
    }
    if (nmax == 0) {
        ymin = 0;
        ymax = 1;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;

    auto px = [&](std::size_t i, std::size_t n) {
        return ml + (n <= 1 ? pw / 2.0 : static_cast<double>(i) * pw / static_cast<double>(n - 1));
    };
    auto py = [&](double v) {
        const double t = log_y ? std::log10(std::max(v, 1e-12)) : v;
        return mt + ph - (t - ymin) / (ymax - ymin) * ph;
    };

    std::ofstream os(file);
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='16'>" << title
       << "</text>\n";
    os << "<text x='" << ml + pw / 2 << "' y='" << H - 12 << "' text-anchor='middle' font-size='12'>"
       << x_label << "</text>\n";
    os << "<text x='16' y='" << mt + ph / 2 << "' font-size='12' transform='rotate(-90 16 "
       << mt + ph / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";
    os << "<rect x='" << ml << "' y='" << mt << "' width='" << pw << "' height='" << ph
       << "' fill='none' stroke='black'/>\n";

    for (int g = 0; g <= 4; ++g) {
        const double v = ymin + (ymax - ymin) * g / 4.0;
        const double yy = mt + ph - static_cast<double>(g) * ph / 4.0;
        os << "<line x1='" << ml << "' y1='" << yy << "' x2='" << ml + pw << "' y2='" << yy
           << "' stroke='#ddd'/>\n";
        const double shown = log_y ? std::pow(10.0, v) : v;
        os << "<text x='" << ml - 6 << "' y='" << yy + 4
           << "' text-anchor='end' font-size='11'>" << shown << "</text>\n";
    }

    int si = 0;
    for (const auto& s : series) {
        os << "<polyline fill='none' stroke='" << s.color << "' stroke-width='2' points='";
        for (std::size_t i = 0; i < s.y.size(); ++i)
            os << px(i, s.y.size()) << "," << py(s.y[i]) << " ";
        os << "'/>\n";
        for (std::size_t i = 0; i < s.y.size(); ++i)
            os << "<circle cx='" << px(i, s.y.size()) << "' cy='" << py(s.y[i]) << "' r='3' fill='"
               << s.color << "'/>\n";
        os << "<text x='" << ml + pw + 12 << "' y='" << mt + 16 + 18 * si << "' font-size='12' fill='"
           << s.color << "'>" << s.name << "</text>\n";
        ++si;
    }
    os << "</svg>\n";
}

}  // namespace msn
