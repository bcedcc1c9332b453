#pragma once

#include <string>

#include <nlohmann/json_fwd.hpp>

#include "latentmark/codec.hpp"
#include "latentmark/mixture.hpp"
#include "latentmark/schedule.hpp"

namespace latentmark {

// One complete closed-form generator: score mixture, noising schedule, and
// latent<->pixel codec, all sharing one tensor shape.
struct ModelBundle {
    MixtureScoreModel mixture;
    NoiseSchedule schedule;
    LinearCodec codec;

    ModelBundle(MixtureScoreModel m, NoiseSchedule s, LinearCodec c);

    const Shape& shape() const { return mixture.shape(); }

    // Same bundle with the codec basis blended toward an independent one —
    // an attacker working through an imperfect copy of the autoencoder.
    ModelBundle with_codec_mismatch(double xi) const;

    // json: { "mixture": {...}, "codec": {"seed", "out_scale"?, "out_bias"?,
    //         "bit_depth"?, "mismatch"?}, "schedule": {"t_train"?,
    //         "beta_start"?, "beta_end"?}? }
    static ModelBundle from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

}  // namespace latentmark
