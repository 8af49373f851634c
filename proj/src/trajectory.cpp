#include "pdtb/trajectory.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pdtb {

void Trajectory::validate() const {
  double tail = 0.0;
  for (int t = length() - 1; t >= 0; --t) {
    const Transition& tr = transitions[t];
    tail += tr.reward;
    if (std::abs(tr.return_to_go - tail) > 1e-9) {
      throw std::runtime_error("Trajectory: return_to_go[" + std::to_string(t) +
                               "] breaks the telescoping invariant");
    }
    if (tr.timestep != t) {
      throw std::runtime_error("Trajectory: timestep " + std::to_string(tr.timestep) +
                               " at index " + std::to_string(t));
    }
  }
  if (std::abs(total_return - tail) > 1e-9) {
    throw std::runtime_error("Trajectory: total_return does not equal the reward sum");
  }
}

int StochasticPrompt::token_count() const {
  int n = 0;
  for (const Segment& s : segments) n += 3 * s.length();
  return n;
}

std::vector<double> compute_returns_to_go(const std::vector<double>& rewards) {
  std::vector<double> rtg(rewards.size());
  double tail = 0.0;
  for (int t = static_cast<int>(rewards.size()) - 1; t >= 0; --t) {
    tail += rewards[t];
    rtg[t] = tail;
  }
  return rtg;
}

std::vector<Segment> extract_segments(const Trajectory& trajectory, int H) {
  if (H < 1) throw std::invalid_argument("extract_segments: H must be >= 1");
  std::vector<Segment> out;
  const int L = trajectory.length();
  for (int off = 0; off + H <= L; ++off) {
    Segment seg;
    seg.transitions.assign(trajectory.transitions.begin() + off,
                           trajectory.transitions.begin() + off + H);
    seg.source_trajectory = 0;
    seg.source_offset = off;
    out.push_back(std::move(seg));
  }
  return out;
}

std::vector<Segment> extract_segments(const std::vector<Trajectory>& demos, int H) {
  std::vector<Segment> out;
  for (int m = 0; m < static_cast<int>(demos.size()); ++m) {
    std::vector<Segment> segs = extract_segments(demos[m], H);
    for (Segment& s : segs) {
      s.source_trajectory = m;
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::int64_t count_segments(const std::vector<Trajectory>& demos, int H) {
  if (H < 1) throw std::invalid_argument("count_segments: H must be >= 1");
  std::int64_t n = 0;
  for (const Trajectory& d : demos) {
    if (d.length() >= H) n += d.length() - H + 1;
  }
  return n;
}

StochasticPrompt assemble_prompt(std::vector<Segment> chosen, int J) {
  if (static_cast<int>(chosen.size()) != J) {
    throw std::invalid_argument("assemble_prompt: expected " + std::to_string(J) +
                                " segments, got " + std::to_string(chosen.size()));
  }
  for (const Segment& s : chosen) {
    if (s.length() != chosen.front().length()) {
      throw std::invalid_argument("assemble_prompt: segments have inconsistent lengths");
    }
  }
  StochasticPrompt p;
  p.segments = std::move(chosen);
  return p;
}

ModelInput concat_input(StochasticPrompt prompt, std::vector<Transition> window, int K) {
  ModelInput in;
  in.prompt = std::move(prompt);
  const int n = static_cast<int>(window.size());
  const int keep = std::min(K, n);
  in.window.assign(window.end() - keep, window.end());
  return in;
}

}  // namespace pdtb
