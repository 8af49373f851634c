#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace pdtb {

// Minimal deterministic SVG writer: fixed float formatting, elements emitted
// in call order, no external tooling.
class SvgCanvas {
 public:
  SvgCanvas(double width, double height);

  void comment(const std::string& text);
  void line(double x1, double y1, double x2, double y2, const std::string& color, double width);
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                double width, const std::string& dash = "");
  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill,
               double opacity);
  void circle(double x, double y, double r, const std::string& fill, double opacity = 1.0);
  void rect(double x, double y, double w, double h, const std::string& fill, double opacity);
  void text(double x, double y, const std::string& s, double size,
            const std::string& anchor = "start", const std::string& color = "#333333");

  std::string str() const;
  void save(const std::filesystem::path& path) const;

 private:
  double w_, h_;
  std::vector<std::string> body_;
};

// Maps v in [lo, hi] onto a blue->red ramp.
std::string heat_color(double v, double lo, double hi);

}  // namespace pdtb
