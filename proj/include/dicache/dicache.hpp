#pragma once

#include "dicache/cachepolicy.hpp"
#include "dicache/config.hpp"
#include "dicache/error.hpp"
#include "dicache/metrics.hpp"
#include "dicache/prng.hpp"
#include "dicache/report.hpp"
#include "dicache/sampler.hpp"
#include "dicache/tensor.hpp"
#include "dicache/toydit.hpp"
#include "dicache/trace.hpp"
