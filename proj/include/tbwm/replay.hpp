#pragma once

// Episode storage and the mixture uniform/prioritized sampler with
// softmax-over-loss priorities. Examples are disjoint H-step windows of
// episodes; short remainders are padded with the terminal step and masked.

#include <iosfwd>
#include <vector>

#include "tbwm/rng.hpp"
#include "tbwm/tokenizers.hpp"

namespace tbwm::replay {

// H steps of (observation tokens, action tokens, reward, termination); the
// unit of world-model training and imagination initialization. Padded steps
// carry valid = 0 and are excluded from losses.
struct TrajectorySegment {
    std::vector<std::vector<tok::TokenSequence>> obs;  // [t][modality]
    std::vector<tok::TokenSequence> act;               // [t]
    std::vector<double> reward;
    std::vector<std::uint8_t> done;
    std::vector<std::uint8_t> valid;

    int length() const { return static_cast<int>(obs.size()); }
    int valid_steps() const;
};

struct Episode {
    std::vector<std::vector<tok::TokenSequence>> obs_tokens;  // [t][modality]
    std::vector<tok::ActionValue> actions;
    std::vector<tok::TokenSequence> act_tokens;
    std::vector<double> rewards;
    std::vector<std::uint8_t> dones;

    int length() const { return static_cast<int>(rewards.size()); }
    // aligned lengths; at most one positive termination, at the end
    void validate() const;
};

class ReplayBuffer {
public:
    ReplayBuffer(int window, int context, double initial_priority = 10.0);

    int window() const { return window_; }
    int context() const { return context_; }

    // Splits the episode into disjoint H-step windows (last one padded) and
    // registers each with the initial priority. Returns the new example ids.
    // Episodes shorter than one step are rejected.
    std::vector<int> append_episode(Episode ep);

    int example_count() const { return static_cast<int>(examples_.size()); }
    int episode_count() const { return static_cast<int>(episodes_.size()); }
    std::int64_t total_steps() const { return total_steps_; }

    // round(alpha*B) ids from softmax(symlog(loss)), remainder uniform; both
    // with replacement. Prioritized draws come first in the result.
    std::vector<int> sample_wm_batch(int batch, double alpha, Rng& rng) const;

    // Replaces stored losses with the examples' current batch losses
    // (duplicate ids: last write wins).
    void update_priorities(const std::vector<int>& ids,
                           const std::vector<double>& losses);

    double priority(int id) const { return priorities_.at(id); }

    TrajectorySegment example(int id) const;

    // Uniformly sampled example, cut to the configured context length.
    TrajectorySegment sample_init_segment(Rng& rng) const;

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    struct ExampleRef {
        int episode = 0;
        int start = 0;
        int true_len = 0;  // valid (unpadded) steps
    };

    int window_;
    int context_;
    double initial_priority_;
    std::vector<Episode> episodes_;
    std::vector<ExampleRef> examples_;
    std::vector<double> priorities_;
    std::int64_t total_steps_ = 0;
};

}  // namespace tbwm::replay
