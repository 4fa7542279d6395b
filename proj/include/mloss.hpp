#pragma once

#include "mloss/activation.hpp"
#include "mloss/config.hpp"
#include "mloss/csv.hpp"
#include "mloss/errors.hpp"
#include "mloss/harness.hpp"
#include "mloss/merging.hpp"
#include "mloss/metric.hpp"
#include "mloss/model_io.hpp"
#include "mloss/network.hpp"
#include "mloss/random.hpp"
#include "mloss/tensor.hpp"
#include "mloss/theory.hpp"
