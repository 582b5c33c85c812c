#include "mlman/model.hpp"

namespace mlman {

Model Model::init(const ModelDims& dims, const MatchVariant& variant, std::mt19937_64& rng) {
    Model m;
    m.encoder = EncoderParams::init(dims.word_dim, dims.position_dim, dims.max_distance,
                                    dims.window, dims.filters, rng);
    const std::size_t lstm_input =
        variant.local == LocalMatching::no_local_match ? dims.filters : dims.hidden;
    m.match = MatchParams::init(dims.filters, dims.hidden, lstm_input, !variant.tied, rng);
    return m;
}

ParameterSet Model::parameters() const {
    ParameterSet ps;
    encoder.register_into(ps);
    match.register_into(ps);
    return ps;
}

Model Model::clone() const {
    Model m;
    m.encoder = {encoder.head_positions.clone(), encoder.tail_positions.clone(),
                 encoder.filters.clone(), encoder.bias.clone()};
    auto lstm = [](const LstmWeights& w) {
        return LstmWeights{w.input.clone(), w.recurrent.clone(), w.bias.clone()};
    };
    m.match.fusion = match.fusion.clone();
    m.match.forward = lstm(match.forward);
    m.match.backward = lstm(match.backward);
    m.match.scorer = match.scorer.clone();
    m.match.scorer_out = match.scorer_out.clone();
    if (match.has_untied()) {
        m.match.instance_scorer = match.instance_scorer.clone();
        m.match.instance_scorer_out = match.instance_scorer_out.clone();
    }
    return m;
}

}  // namespace mlman
