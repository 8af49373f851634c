#include "pdtb/svg.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace pdtb {

namespace {

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

SvgCanvas::SvgCanvas(double width, double height) : w_(width), h_(height) {}

void SvgCanvas::comment(const std::string& text) {
  body_.push_back("<!-- " + escape(text) + " -->");
}

void SvgCanvas::line(double x1, double y1, double x2, double y2, const std::string& color,
                     double width) {
  body_.push_back("<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) +
                  "\" y2=\"" + num(y2) + "\" stroke=\"" + color + "\" stroke-width=\"" +
                  num(width) + "\"/>");
}

void SvgCanvas::polyline(const std::vector<std::pair<double, double>>& pts,
                         const std::string& color, double width, const std::string& dash) {
  if (pts.empty()) return;
  std::string d = "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"" + num(width) +
                  "\"";
  if (!dash.empty()) d += " stroke-dasharray=\"" + dash + "\"";
  d += " points=\"";
  for (const auto& [x, y] : pts) d += num(x) + "," + num(y) + " ";
  d += "\"/>";
  body_.push_back(d);
}

void SvgCanvas::polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill,
                        double opacity) {
  if (pts.empty()) return;
  std::string d = "<polygon fill=\"" + fill + "\" fill-opacity=\"" + num(opacity) +
                  "\" stroke=\"none\" points=\"";
  for (const auto& [x, y] : pts) d += num(x) + "," + num(y) + " ";
  d += "\"/>";
  body_.push_back(d);
}

void SvgCanvas::circle(double x, double y, double r, const std::string& fill, double opacity) {
  body_.push_back("<circle cx=\"" + num(x) + "\" cy=\"" + num(y) + "\" r=\"" + num(r) +
                  "\" fill=\"" + fill + "\" fill-opacity=\"" + num(opacity) + "\"/>");
}

void SvgCanvas::rect(double x, double y, double w, double h, const std::string& fill,
                     double opacity) {
  body_.push_back("<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) +
                  "\" height=\"" + num(h) + "\" fill=\"" + fill + "\" fill-opacity=\"" +
                  num(opacity) + "\"/>");
}

void SvgCanvas::text(double x, double y, const std::string& s, double size,
                     const std::string& anchor, const std::string& color) {
  body_.push_back("<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-size=\"" + num(size) +
                  "\" font-family=\"sans-serif\" text-anchor=\"" + anchor + "\" fill=\"" + color +
                  "\">" + escape(s) + "</text>");
}

std::string SvgCanvas::str() const {
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w_) +
                    "\" height=\"" + num(h_) + "\" viewBox=\"0 0 " + num(w_) + " " + num(h_) +
                    "\">\n";
  out += "<rect x=\"0\" y=\"0\" width=\"" + num(w_) + "\" height=\"" + num(h_) +
         "\" fill=\"#ffffff\"/>\n";
  for (const std::string& e : body_) {
    out += e;
    out += "\n";
  }
  out += "</svg>\n";
  return out;
}

void SvgCanvas::save(const std::filesystem::path& path) const {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("SvgCanvas::save: cannot open " + tmp.string());
    out << str();
  }
  std::filesystem::rename(tmp, path);
}

std::string heat_color(double v, double lo, double hi) {
  double f = hi > lo ? (v - lo) / (hi - lo) : 0.5;
  f = std::clamp(f, 0.0, 1.0);
  const int r = static_cast<int>(40 + 215 * f);
  const int g = static_cast<int>(60 + 40 * (1.0 - std::abs(2 * f - 1)));
  const int b = static_cast<int>(40 + 215 * (1.0 - f));
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

}  // namespace pdtb
