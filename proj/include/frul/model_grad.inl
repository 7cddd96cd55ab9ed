#pragma once

#include <cmath>
#include <sstream>

#include "frul/common.hpp"

namespace frul::model {

template <class S, class LossFn>
GradResult<S> grad(const Parameters<S>& params, LossFn&& loss_fn) {
    Tape<S> tape(params);
    const S value = loss_fn(tape);
    if (!std::isfinite(static_cast<double>(value))) {
        std::ostringstream msg;
        msg << "non-finite loss " << static_cast<double>(value);
        throw RuntimeFailure(msg.str());
    }
    return {value, tape.backward()};
}

}  // namespace frul::model
