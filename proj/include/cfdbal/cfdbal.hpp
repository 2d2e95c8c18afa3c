#pragma once

#include "errors.hpp"
#include "random.hpp"
#include "parallel.hpp"
#include "kernels.hpp"
#include "cfd.hpp"
#include "qp.hpp"
#include "balance.hpp"
#include "estimators.hpp"
#include "inference.hpp"
#include "sim.hpp"
#include "csv.hpp"
#include "runner.hpp"
