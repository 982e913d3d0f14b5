#pragma once

#include <string>
#include <string_view>

namespace resflow {

// Elementwise nonlinearities usable inside a residual branch. Every one of
// them has slope bounded by 1 so the branch Lipschitz bound is the product of
// the weight norms. Only LipSwish carries a learnable beta.
enum class Activation { lipswish, softplus, elu, identity };

Activation parse_activation(std::string_view name);
std::string to_string(Activation a);

double sigmoid(double z);
double softplus(double z);
double softplus_inverse(double y);

/// z * sigmoid(beta * z) / 1.1
double lipswish(double z, double beta);
double lipswish_d1(double z, double beta);
double lipswish_d2(double z, double beta);
double lipswish_dbeta(double z, double beta);
double lipswish_d1_dbeta(double z, double beta);

// Unscaled Swish derivative, used for the 1.1 slope bound check.
double swish_d1(double z, double beta);

// Value and derivatives of an activation at one point. `dbeta` and
// `d1_dbeta` are partials with respect to beta itself (not raw_beta) and are
// zero for activations without a beta.
struct ActivationDerivs {
    double value;
    double d1;
    double d2;
    double dbeta;
    double d1_dbeta;
};

ActivationDerivs activation_derivs(Activation a, double z, double beta);
double activation_value(Activation a, double z, double beta);
double activation_d1(Activation a, double z, double beta);

}  // namespace resflow
