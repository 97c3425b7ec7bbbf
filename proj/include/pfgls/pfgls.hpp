// Umbrella header.
#pragma once

#include "pfgls/block_matrix.hpp"
#include "pfgls/covariance.hpp"
#include "pfgls/errors.hpp"
#include "pfgls/estimators.hpp"
#include "pfgls/monte_carlo.hpp"
#include "pfgls/panel.hpp"
