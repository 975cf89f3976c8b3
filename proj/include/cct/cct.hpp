#pragma once

#include "cct/checkpoint.hpp"
#include "cct/config.hpp"
#include "cct/data.hpp"
#include "cct/error.hpp"
#include "cct/experiment.hpp"
#include "cct/gradcheck.hpp"
#include "cct/gradsuite.hpp"
#include "cct/layers.hpp"
#include "cct/model.hpp"
#include "cct/ops.hpp"
#include "cct/optim.hpp"
#include "cct/parallel.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"
#include "cct/tokenizer.hpp"
#include "cct/trainer.hpp"
