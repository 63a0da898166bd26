#include "tbwm/replay.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tbwm/io.hpp"
#include "tbwm/rac.hpp"

namespace tbwm::replay {

int TrajectorySegment::valid_steps() const {
    int n = 0;
    for (auto v : valid) n += v != 0;
    return n;
}

void Episode::validate() const {
    const std::size_t n = rewards.size();
    if (obs_tokens.size() != n || actions.size() != n ||
        act_tokens.size() != n || dones.size() != n)
        throw std::invalid_argument("Episode: misaligned step arrays");
    for (std::size_t t = 0; t < n; ++t)
        if (dones[t] && t + 1 != n)
            throw std::invalid_argument("Episode: termination before the end");
    for (double r : rewards)
        if (!std::isfinite(r))
            throw std::invalid_argument("Episode: non-finite reward");
}

ReplayBuffer::ReplayBuffer(int window, int context, double initial_priority)
    : window_(window), context_(context), initial_priority_(initial_priority) {
    if (window < 1 || context < 1)
        throw std::invalid_argument("ReplayBuffer: window and context must be >= 1");
}

std::vector<int> ReplayBuffer::append_episode(Episode ep) {
    ep.validate();
    const int len = ep.length();
    if (len < 1)
        throw std::invalid_argument(
            "append_episode: episode shorter than the minimum context (1 step)");
    const int epi = static_cast<int>(episodes_.size());
    episodes_.push_back(std::move(ep));
    total_steps_ += len;

    std::vector<int> ids;
    for (int start = 0; start < len; start += window_) {
        ExampleRef ref;
        ref.episode = epi;
        ref.start = start;
        ref.true_len = std::min(window_, len - start);
        ids.push_back(static_cast<int>(examples_.size()));
        examples_.push_back(ref);
        priorities_.push_back(initial_priority_);
    }
    return ids;
}

std::vector<int> ReplayBuffer::sample_wm_batch(int batch, double alpha,
                                               Rng& rng) const {
    if (examples_.empty())
        throw std::logic_error("sample_wm_batch: empty buffer");
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("sample_wm_batch: alpha outside [0, 1]");
    const int n_pri = static_cast<int>(std::lround(alpha * batch));

    std::vector<int> out;
    out.reserve(batch);
    if (n_pri > 0) {
        // softmax over symlog-compressed losses (keeps beta0-scale entries
        // from overflowing the exponentials)
        std::vector<double> w(examples_.size());
        double mx = -1e300;
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = rac::symlog(priorities_[i]);
            mx = std::max(mx, w[i]);
        }
        for (auto& v : w) v = std::exp(v - mx);
        for (int i = 0; i < n_pri; ++i)
            out.push_back(rng.categorical(w));
    }
    for (int i = n_pri; i < batch; ++i)
        out.push_back(static_cast<int>(rng.uniform_int(examples_.size())));
    return out;
}

void ReplayBuffer::update_priorities(const std::vector<int>& ids,
                                     const std::vector<double>& losses) {
    if (ids.size() != losses.size())
        throw std::invalid_argument("update_priorities: size mismatch");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= example_count())
            throw std::invalid_argument("update_priorities: unknown id");
        if (!std::isfinite(losses[i]) || losses[i] < 0.0)
            throw std::invalid_argument("update_priorities: bad loss value");
        priorities_[ids[i]] = losses[i];
    }
}

TrajectorySegment ReplayBuffer::example(int id) const {
    if (id < 0 || id >= example_count())
        throw std::invalid_argument("example: unknown id");
    const ExampleRef& ref = examples_[id];
    const Episode& ep = episodes_[ref.episode];
    TrajectorySegment seg;
    seg.obs.resize(window_);
    seg.act.resize(window_);
    seg.reward.assign(window_, 0.0);
    seg.done.assign(window_, 0);
    seg.valid.assign(window_, 0);
    for (int t = 0; t < window_; ++t) {
        // pad past the end by repeating the terminal step, masked out
        const int src = std::min(ref.start + t, ep.length() - 1);
        seg.obs[t] = ep.obs_tokens[src];
        seg.act[t] = ep.act_tokens[src];
        if (t < ref.true_len) {
            seg.reward[t] = ep.rewards[src];
            seg.done[t] = ep.dones[src];
            seg.valid[t] = 1;
        }
    }
    return seg;
}

TrajectorySegment ReplayBuffer::sample_init_segment(Rng& rng) const {
    if (examples_.empty())
        throw std::logic_error("sample_init_segment: empty buffer");
    const int id = static_cast<int>(rng.uniform_int(examples_.size()));
    TrajectorySegment seg = example(id);
    const int keep = std::min(context_, examples_[id].true_len);
    seg.obs.resize(keep);
    seg.act.resize(keep);
    seg.reward.resize(keep);
    seg.done.resize(keep);
    seg.valid.resize(keep);
    return seg;
}

namespace {

void write_token_seq(std::ostream& os, const tok::TokenSequence& s) {
    io::write_i64(os, s.modality);
    io::write_i64(os, s.channels);
    io::write_i32_vec(os, s.tokens);
}

tok::TokenSequence read_token_seq(std::istream& is) {
    tok::TokenSequence s;
    s.modality = static_cast<int>(io::read_i64(is));
    s.channels = static_cast<int>(io::read_i64(is));
    s.tokens = io::read_i32_vec(is);
    return s;
}

}  // namespace

void ReplayBuffer::save(std::ostream& os) const {
    io::write_i64(os, window_);
    io::write_i64(os, context_);
    io::write_f64(os, initial_priority_);
    io::write_i64(os, total_steps_);
    io::write_u64(os, episodes_.size());
    for (const auto& ep : episodes_) {
        io::write_u64(os, ep.rewards.size());
        for (int t = 0; t < ep.length(); ++t) {
            io::write_u64(os, ep.obs_tokens[t].size());
            for (const auto& seq : ep.obs_tokens[t]) write_token_seq(os, seq);
            io::write_i64(os, ep.actions[t].discrete);
            io::write_f64_vec(os, ep.actions[t].continuous);
            write_token_seq(os, ep.act_tokens[t]);
            io::write_f64(os, ep.rewards[t]);
            io::write_u64(os, ep.dones[t]);
        }
    }
    io::write_u64(os, examples_.size());
    for (const auto& ex : examples_) {
        io::write_i64(os, ex.episode);
        io::write_i64(os, ex.start);
        io::write_i64(os, ex.true_len);
    }
    io::write_f64_vec(os, priorities_);
}

void ReplayBuffer::load(std::istream& is) {
    window_ = static_cast<int>(io::read_i64(is));
    context_ = static_cast<int>(io::read_i64(is));
    initial_priority_ = io::read_f64(is);
    total_steps_ = io::read_i64(is);
    episodes_.clear();
    examples_.clear();
    const auto n_ep = io::read_u64(is);
    episodes_.resize(n_ep);
    for (auto& ep : episodes_) {
        const auto len = io::read_u64(is);
        ep.obs_tokens.resize(len);
        ep.actions.resize(len);
        ep.act_tokens.resize(len);
        ep.rewards.resize(len);
        ep.dones.resize(len);
        for (std::size_t t = 0; t < len; ++t) {
            const auto nmod = io::read_u64(is);
            ep.obs_tokens[t].resize(nmod);
            for (auto& seq : ep.obs_tokens[t]) seq = read_token_seq(is);
            ep.actions[t].discrete = static_cast<int>(io::read_i64(is));
            ep.actions[t].continuous = io::read_f64_vec(is);
            ep.act_tokens[t] = read_token_seq(is);
            ep.rewards[t] = io::read_f64(is);
            ep.dones[t] = static_cast<std::uint8_t>(io::read_u64(is));
        }
    }
    const auto n_ex = io::read_u64(is);
    examples_.resize(n_ex);
    for (auto& ex : examples_) {
        ex.episode = static_cast<int>(io::read_i64(is));
        ex.start = static_cast<int>(io::read_i64(is));
        ex.true_len = static_cast<int>(io::read_i64(is));
    }
    priorities_ = io::read_f64_vec(is);
}

}  // namespace tbwm::replay
