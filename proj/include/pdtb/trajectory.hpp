#pragma once

#include <cstdint>
#include <vector>

namespace pdtb {

// One (return-to-go, state, action) step of a trajectory. return_to_go is the
// undiscounted sum of this step's reward and everything after it.
struct Transition {
  double return_to_go = 0.0;
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  int timestep = 0;
};

struct Trajectory {
  std::vector<Transition> transitions;
  int task_id = -1;
  double total_return = 0.0;

  int length() const { return static_cast<int>(transitions.size()); }

  // Checks the telescoping return-to-go invariant, timestep ordering and
  // total_return consistency; throws std::runtime_error on violation.
  void validate() const;
};

// Contiguous length-H window of a trajectory, tagged with where it came from
// so visit counts and selection logs stay well defined.
struct Segment {
  std::vector<Transition> transitions;
  int source_trajectory = -1;
  int source_offset = -1;

  int length() const { return static_cast<int>(transitions.size()); }
};

// Ordered list of J segments; slot order is significant (slot j is arm j's
// choice) and the flattened token count is J*H*3.
struct StochasticPrompt {
  std::vector<Segment> segments;

  int num_segments() const { return static_cast<int>(segments.size()); }
  int segment_len() const { return segments.empty() ? 0 : segments.front().length(); }
  int token_count() const;
};

// Prompt followed by the most recent (at most K) transitions of the episode.
struct ModelInput {
  StochasticPrompt prompt;
  std::vector<Transition> window;

  int token_count() const { return prompt.token_count() + 3 * static_cast<int>(window.size()); }
};

// output[t] = sum of rewards[t:]
std::vector<double> compute_returns_to_go(const std::vector<double>& rewards);

// Every contiguous window of length H, with provenance indices. Trajectories
// shorter than H yield nothing.
std::vector<Segment> extract_segments(const Trajectory& trajectory, int H);

// Segments of one trajectory appended in trajectory order.
std::vector<Segment> extract_segments(const std::vector<Trajectory>& demos, int H);

std::int64_t count_segments(const std::vector<Trajectory>& demos, int H);

// Throws std::invalid_argument unless exactly J segments of equal length are
// supplied.
StochasticPrompt assemble_prompt(std::vector<Segment> chosen, int J);

// Keeps only the last min(K, |window|) transitions. No padding here; padding
// is the model's concern.
ModelInput concat_input(StochasticPrompt prompt, std::vector<Transition> window, int K);

}  // namespace pdtb
