#pragma once

#include "diffap/types.hpp"
#include "diffap/rng.hpp"
#include "diffap/schedule.hpp"
#include "diffap/mixture.hpp"
#include "diffap/score.hpp"
#include "diffap/sampler.hpp"
#include "diffap/guidance.hpp"
#include "diffap/classifier.hpp"
#include "diffap/purifier.hpp"
#include "diffap/attack.hpp"
#include "diffap/config.hpp"
#include "diffap/harness.hpp"
#include "diffap/checks.hpp"
