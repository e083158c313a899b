#pragma once

#define MPVCROP_VERSION "0.1.0"

#include "mpvcrop/error.hpp"
#include "mpvcrop/rng.hpp"
#include "mpvcrop/geometry.hpp"
#include "mpvcrop/autodiff.hpp"
#include "mpvcrop/checkpoint.hpp"
#include "mpvcrop/models.hpp"
#include "mpvcrop/data.hpp"
#include "mpvcrop/policy.hpp"
#include "mpvcrop/metrics.hpp"
#include "mpvcrop/trainer.hpp"
#include "mpvcrop/eval.hpp"
#include "mpvcrop/config.hpp"
#include "mpvcrop/verify.hpp"
