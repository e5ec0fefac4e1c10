// checkpoint.hpp - versioned binary model files. A checkpoint bundles the
// spec, the standardization record, both parameter stores (final iterate and
// de-biased average), and enough trainer state to resume. Doubles travel as
// raw bit patterns, so reload is bit-exact; an FNV-1a checksum over the
// payload catches truncation and corruption.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ctirf/model.hpp"
#include "ctirf/trainer.hpp"

namespace ctirf {

inline const std::string kCheckpointMagic = "CTIRFCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelSpec spec;
    TrainingStats stats;
    ParameterStore params;    // final iterate
    ParameterStore averaged;  // de-biased average; default for prediction
    AdamState adam;
    LossGuardState guard;
    std::uint64_t epoch = 0;
};

namespace detail {

struct ByteWriter {
    std::vector<std::uint8_t> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t u;
        std::memcpy(&u, &v, 8);
        u64(u);
    }
    void str(const std::string& s) {
        u64(s.size());
        bytes.insert(bytes.end(), s.begin(), s.end());
    }
    void dvec(const std::vector<double>& v) {
        u64(v.size());
        for (double x : v) f64(x);
    }
    void svec(const std::vector<std::string>& v) {
        u64(v.size());
        for (const auto& s : v) str(s);
    }
    void zvec(const std::vector<std::size_t>& v) {
        u64(v.size());
        for (auto x : v) u64(x);
    }
};

struct ByteReader {
    const std::uint8_t* p;
    const std::uint8_t* end;

    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end - p) < n)
            throw DataError("checkpoint truncated");
    }
    std::uint8_t u8() {
        need(1);
        return *p++;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(*p++) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(*p++) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t u = u64();
        double v;
        std::memcpy(&v, &u, 8);
        return v;
    }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
    std::vector<double> dvec() {
        const std::uint64_t n = u64();
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
    std::vector<std::string> svec() {
        const std::uint64_t n = u64();
        std::vector<std::string> v(n);
        for (auto& s : v) s = str();
        return v;
    }
    std::vector<std::size_t> zvec() {
        const std::uint64_t n = u64();
        std::vector<std::size_t> v(n);
        for (auto& x : v) x = u64();
        return v;
    }
};

inline void write_spec(ByteWriter& w, const ModelSpec& spec) {
    w.svec(spec.predictors);
    w.zvec(spec.f_in_hidden);
    w.u64(spec.blocks.size());
    for (const auto& blk : spec.blocks) {
        w.svec(blk.convolved);
        w.svec(blk.conditioning);
        w.u8(blk.include_offset_d);
        w.u8(blk.include_timestamp_t);
        w.u8(blk.dirac_delta);
        w.u64(blk.targets.size());
        for (auto t : blk.targets) w.u8(t == TargetParam::sigma);
    }
    w.u64(spec.history_length);
    w.f64(spec.max_lookback);
    w.u64(spec.random_factors.size());
    for (const auto& rf : spec.random_factors) {
        w.str(rf.name);
        w.u8(rf.offsets_hidden_bias);
        w.u8(rf.offsets_b);
        w.u8(rf.offsets_s0);
    }
    w.zvec(spec.hp.hidden);
    w.f64(spec.hp.weight_l2);
    w.f64(spec.hp.ranef_l2);
    w.f64(spec.hp.dropout);
    w.f64(spec.hp.learning_rate);
    w.u64(spec.hp.batch_size);
    w.u8(spec.hp.inference == InferenceMode::variational);
}

inline ModelSpec read_spec(ByteReader& r) {
    ModelSpec spec;
    spec.predictors = r.svec();
    spec.f_in_hidden = r.zvec();
    const std::uint64_t nb = r.u64();
    spec.blocks.resize(nb);
    for (auto& blk : spec.blocks) {
        blk.convolved = r.svec();
        blk.conditioning = r.svec();
        blk.include_offset_d = r.u8() != 0;
        blk.include_timestamp_t = r.u8() != 0;
        blk.dirac_delta = r.u8() != 0;
        const std::uint64_t nt = r.u64();
        blk.targets.clear();
        for (std::uint64_t i = 0; i < nt; ++i)
            blk.targets.push_back(r.u8() ? TargetParam::sigma : TargetParam::mu);
    }
    spec.history_length = r.u64();
    spec.max_lookback = r.f64();
    const std::uint64_t nf = r.u64();
    spec.random_factors.resize(nf);
    for (auto& rf : spec.random_factors) {
        rf.name = r.str();
        rf.offsets_hidden_bias = r.u8() != 0;
        rf.offsets_b = r.u8() != 0;
        rf.offsets_s0 = r.u8() != 0;
    }
    spec.hp.hidden = r.zvec();
    spec.hp.weight_l2 = r.f64();
    spec.hp.ranef_l2 = r.f64();
    spec.hp.dropout = r.f64();
    spec.hp.learning_rate = r.f64();
    spec.hp.batch_size = r.u64();
    spec.hp.inference = r.u8() ? InferenceMode::variational : InferenceMode::mle;
    return spec;
}

inline std::vector<double> flatten_params(const ParameterStore& ps) {
    std::vector<double> flat;
    flat.reserve(param_count(ps));
    visit_params(ps, [&flat](const double& v) { flat.push_back(v); });
    return flat;
}

inline void unflatten_params(ParameterStore& ps, const std::vector<double>& flat) {
    if (flat.size() != param_count(ps))
        throw DataError("checkpoint parameter count does not match its spec");
    std::size_t i = 0;
    visit_params(ps, [&flat, &i](double& v) { v = flat[i++]; });
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    detail::ByteWriter w;
    detail::write_spec(w, ck.spec);

    w.dvec(ck.stats.pred_sd);
    w.dvec(ck.stats.pred_mean);
    w.dvec(ck.stats.pred_min);
    w.dvec(ck.stats.pred_max);
    w.f64(ck.stats.y_sd);
    w.f64(ck.stats.y_mean);
    w.f64(ck.stats.mean_time);
    w.f64(ck.stats.time_min);
    w.f64(ck.stats.time_max);
    w.f64(ck.stats.time_sd);
    w.f64(ck.stats.offset_sd);
    w.u64(ck.stats.train_count);

    w.u64(ck.params.registry.levels.size());
    for (const auto& levels : ck.params.registry.levels) w.svec(levels);

    w.dvec(detail::flatten_params(ck.params));
    w.dvec(detail::flatten_params(ck.averaged));

    w.dvec(ck.adam.m);
    w.dvec(ck.adam.v);
    w.u64(ck.adam.step);
    w.f64(ck.adam.lr);

    w.f64(ck.guard.ema_loss);
    w.f64(ck.guard.ema_sq);
    w.u64(ck.guard.count);

    w.u64(ck.epoch);

    // Frame: magic, version, payload, checksum over the payload.
    std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    detail::ByteWriter frame;
    frame.u32(kCheckpointVersion);
    out.insert(out.end(), frame.bytes.begin(), frame.bytes.end());
    out.insert(out.end(), w.bytes.begin(), w.bytes.end());
    detail::ByteWriter sum;
    sum.u64(fnv1a(w.bytes.data(), w.bytes.size()));
    out.insert(out.end(), sum.bytes.begin(), sum.bytes.end());
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    const std::size_t header = kCheckpointMagic.size() + 4;
    if (bytes.size() < header + 8)
        throw DataError("checkpoint file is too short");
    if (!std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
        throw DataError("not a model checkpoint (bad magic)");

    detail::ByteReader head{bytes.data() + kCheckpointMagic.size(),
                            bytes.data() + bytes.size()};
    const std::uint32_t version = head.u32();
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));

    const std::uint8_t* payload = bytes.data() + header;
    const std::size_t payload_len = bytes.size() - header - 8;
    detail::ByteReader tail{payload + payload_len, bytes.data() + bytes.size()};
    if (tail.u64() != fnv1a(payload, payload_len))
        throw DataError("checkpoint checksum mismatch");

    detail::ByteReader r{payload, payload + payload_len};
    Checkpoint ck;
    ck.spec = detail::read_spec(r);

    ck.stats.pred_sd = r.dvec();
    ck.stats.pred_mean = r.dvec();
    ck.stats.pred_min = r.dvec();
    ck.stats.pred_max = r.dvec();
    ck.stats.y_sd = r.f64();
    ck.stats.y_mean = r.f64();
    ck.stats.mean_time = r.f64();
    ck.stats.time_min = r.f64();
    ck.stats.time_max = r.f64();
    ck.stats.time_sd = r.f64();
    ck.stats.offset_sd = r.f64();
    ck.stats.train_count = r.u64();

    LevelRegistry registry;
    registry.levels.resize(r.u64());
    for (auto& levels : registry.levels) levels = r.svec();

    // Rebuild the stores from the spec, then overwrite every scalar.
    Rng scratch(0);
    ck.params = init_parameter_store(ck.spec, registry, scratch);
    ck.averaged = init_parameter_store(ck.spec, registry, scratch);
    detail::unflatten_params(ck.params, r.dvec());
    detail::unflatten_params(ck.averaged, r.dvec());

    ck.adam.m = r.dvec();
    ck.adam.v = r.dvec();
    ck.adam.step = r.u64();
    ck.adam.lr = r.f64();

    ck.guard.ema_loss = r.f64();
    ck.guard.ema_sq = r.f64();
    ck.guard.count = r.u64();

    ck.epoch = r.u64();
    if (r.p != r.end) throw DataError("checkpoint has trailing bytes");
    return ck;
}

// Atomic save: write to a sibling temp file, then rename over the target.
inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const auto bytes = serialize_checkpoint(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint file '" + tmp + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("short write to checkpoint file '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("cannot move checkpoint into place at '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint file '" + path + "'");
    std::vector<std::uint8_t> bytes(std::istreambuf_iterator<char>(in), {});
    return deserialize_checkpoint(bytes);
}

inline Checkpoint checkpoint_from_fit(const ModelSpec& spec,
                                      const TrainingStats& stats,
                                      const FitResult& result) {
    Checkpoint ck;
    ck.spec = spec;
    ck.stats = stats;
    ck.params = result.params;
    ck.averaged = result.averaged;
    ck.adam = result.adam;
    ck.guard = result.guard;
    ck.epoch = result.epochs;
    return ck;
}

}  // namespace ctirf
