#include "latentmark/model.hpp"

#include <nlohmann/json.hpp>

#include "latentmark/errors.hpp"

namespace latentmark {

ModelBundle::ModelBundle(MixtureScoreModel m, NoiseSchedule s, LinearCodec c)
    : mixture(std::move(m)), schedule(std::move(s)), codec(std::move(c)) {
    require_same_shape(mixture.shape(), codec.shape(), "model bundle");
}

ModelBundle ModelBundle::with_codec_mismatch(double xi) const {
    LinearCodec blended(codec.shape(), codec.seed(), codec.out_scale(), codec.out_bias(),
                        codec.bit_depth(), xi);
    return ModelBundle(mixture, schedule, std::move(blended));
}

ModelBundle ModelBundle::from_json(const nlohmann::json& j) {
    try {
        MixtureScoreModel mixture = MixtureScoreModel::from_json(j.at("mixture"));

        int t_train = 1000;
        double beta_start = 1e-4, beta_end = 2e-2;
        if (j.contains("schedule")) {
            const auto& js = j.at("schedule");
            t_train = js.value("t_train", t_train);
            beta_start = js.value("beta_start", beta_start);
            beta_end = js.value("beta_end", beta_end);
        }
        NoiseSchedule schedule(t_train, beta_start, beta_end);

        const auto& jc = j.at("codec");
        LinearCodec codec(mixture.shape(), jc.at("seed").get<std::uint64_t>(),
                          jc.value("out_scale", 24.0), jc.value("out_bias", 128.0),
                          jc.value("bit_depth", 8), jc.value("mismatch", 0.0));
        return ModelBundle(std::move(mixture), std::move(schedule), std::move(codec));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model: malformed json: ") + e.what());
    }
}

nlohmann::json ModelBundle::to_json() const {
    nlohmann::json j;
    j["mixture"] = mixture.to_json();
    j["schedule"] = {{"t_train", schedule.t_train()},
                     {"beta_start", schedule.beta(1)},
                     {"beta_end", schedule.beta(schedule.t_train())}};
    j["codec"] = {{"seed", codec.seed()},
                  {"out_scale", codec.out_scale()},
                  {"out_bias", codec.out_bias()},
                  {"bit_depth", codec.bit_depth()},
                  {"mismatch", codec.mismatch()}};
    return j;
}

}  // namespace latentmark
