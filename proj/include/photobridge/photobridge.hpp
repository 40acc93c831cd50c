#pragma once

// Everything: autodiff core, vocabularies, bridge, models, data, training, metrics.
#include "photobridge/ad/adamw.hpp"
#include "photobridge/ad/checkpoint.hpp"
#include "photobridge/ad/gradcheck.hpp"
#include "photobridge/ad/ops.hpp"
#include "photobridge/ad/sparse.hpp"
#include "photobridge/ad/tensor.hpp"
#include "photobridge/audit.hpp"
#include "photobridge/bridge.hpp"
#include "photobridge/config.hpp"
#include "photobridge/data.hpp"
#include "photobridge/errors.hpp"
#include "photobridge/image.hpp"
#include "photobridge/log.hpp"
#include "photobridge/metrics.hpp"
#include "photobridge/models/generator.hpp"
#include "photobridge/models/lm.hpp"
#include "photobridge/models/params.hpp"
#include "photobridge/models/perceptron.hpp"
#include "photobridge/rng.hpp"
#include "photobridge/sampling.hpp"
#include "photobridge/trainer.hpp"
#include "photobridge/vocab.hpp"
