#pragma once

#include "mcdit/adapters.hpp"
#include "mcdit/bench.hpp"
#include "mcdit/checkpoint.hpp"
#include "mcdit/conditioning.hpp"
#include "mcdit/config.hpp"
#include "mcdit/distill.hpp"
#include "mcdit/dit.hpp"
#include "mcdit/dit_config.hpp"
#include "mcdit/errors.hpp"
#include "mcdit/flow.hpp"
#include "mcdit/grad_check.hpp"
#include "mcdit/image.hpp"
#include "mcdit/ops.hpp"
#include "mcdit/param_store.hpp"
#include "mcdit/pipeline.hpp"
#include "mcdit/rng.hpp"
#include "mcdit/tensor.hpp"
