#include "activation.hpp"

#include <cmath>

#include "common.hpp"

namespace resflow {

namespace {
constexpr double kSwishScale = 1.1;
}

Activation parse_activation(std::string_view name) {
    if (name == "lipswish") return Activation::lipswish;
    if (name == "softplus") return Activation::softplus;
    if (name == "elu") return Activation::elu;
    if (name == "identity") return Activation::identity;
    throw Error(ErrorCode::config, "unknown activation '" + std::string(name) + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::lipswish: return "lipswish";
        case Activation::softplus: return "softplus";
        case Activation::elu: return "elu";
        case Activation::identity: return "identity";
    }
    return "?";
}

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) {
    return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double softplus_inverse(double y) {
    require(y > 0, ErrorCode::refusal, "softplus_inverse requires a positive argument");
    return y > 30 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

double lipswish(double z, double beta) { return z * sigmoid(beta * z) / kSwishScale; }

double swish_d1(double z, double beta) {
    const double s = sigmoid(beta * z);
    return s * (1.0 + beta * z * (1.0 - s));
}

double lipswish_d1(double z, double beta) { return swish_d1(z, beta) / kSwishScale; }

double lipswish_d2(double z, double beta) {
    const double t = beta * z;
    const double s = sigmoid(t);
    return beta * s * (1.0 - s) * (2.0 + t * (1.0 - 2.0 * s)) / kSwishScale;
}

double lipswish_dbeta(double z, double beta) {
    const double s = sigmoid(beta * z);
    return z * z * s * (1.0 - s) / kSwishScale;
}

double lipswish_d1_dbeta(double z, double beta) {
    const double t = beta * z;
    const double s = sigmoid(t);
    return z * s * (1.0 - s) * (2.0 + t * (1.0 - 2.0 * s)) / kSwishScale;
}

ActivationDerivs activation_derivs(Activation a, double z, double beta) {
    switch (a) {
        case Activation::lipswish: {
            const double t = beta * z;
            const double s = sigmoid(t);
            const double ss = s * (1.0 - s);
            const double h = ss * (2.0 + t * (1.0 - 2.0 * s));
            return {z * s / kSwishScale, s * (1.0 + t * (1.0 - s)) / kSwishScale, beta * h / kSwishScale,
                    z * z * ss / kSwishScale, z * h / kSwishScale};
        }
        case Activation::softplus: {
            const double s = sigmoid(z);
            return {softplus(z), s, s * (1.0 - s), 0.0, 0.0};
        }
        case Activation::elu: {
            if (z > 0) return {z, 1.0, 0.0, 0.0, 0.0};
            const double e = std::exp(z);
            return {std::expm1(z), e, e, 0.0, 0.0};
        }
        case Activation::identity: return {z, 1.0, 0.0, 0.0, 0.0};
    }
    return {};
}

double activation_value(Activation a, double z, double beta) {
    switch (a) {
        case Activation::lipswish: return lipswish(z, beta);
        case Activation::softplus: return softplus(z);
        case Activation::elu: return z > 0 ? z : std::expm1(z);
        case Activation::identity: return z;
    }
    return 0.0;
}

double activation_d1(Activation a, double z, double beta) {
    switch (a) {
        case Activation::lipswish: return lipswish_d1(z, beta);
        case Activation::softplus: return sigmoid(z);
        case Activation::elu: return z > 0 ? 1.0 : std::exp(z);
        case Activation::identity: return 1.0;
    }
    return 0.0;
}

}  // namespace resflow
