#pragma once

#include "greip/augment.hpp"
#include "greip/gradcheck.hpp"
#include "greip/harness.hpp"
#include "greip/interp.hpp"
#include "greip/metrics.hpp"
#include "greip/model.hpp"
#include "greip/objectives.hpp"
#include "greip/optim.hpp"
#include "greip/rng.hpp"
#include "greip/stmap.hpp"
#include "greip/synth.hpp"
#include "greip/tensor.hpp"
