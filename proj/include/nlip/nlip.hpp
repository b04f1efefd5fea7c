#pragma once

#include "nlip/errors.hpp"
#include "nlip/random.hpp"
#include "nlip/param_store.hpp"
#include "nlip/optimizer.hpp"
#include "nlip/schedule.hpp"
#include "nlip/checkpoint.hpp"
#include "nlip/layers.hpp"
#include "nlip/data_synth.hpp"
#include "nlip/corpus_io.hpp"
#include "nlip/encoders.hpp"
#include "nlip/alignment.hpp"
#include "nlip/noise_model.hpp"
#include "nlip/captioner.hpp"
#include "nlip/model.hpp"
#include "nlip/concepts.hpp"
#include "nlip/eval.hpp"
#include "nlip/trainer.hpp"
#include "nlip/config.hpp"
#include "nlip/pipeline.hpp"
