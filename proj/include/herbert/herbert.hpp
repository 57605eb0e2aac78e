#pragma once

#include "herbert/checkpoint.hpp"
#include "herbert/corpus.hpp"
#include "herbert/error.hpp"
#include "herbert/evalstats.hpp"
#include "herbert/model.hpp"
#include "herbert/objectives.hpp"
#include "herbert/pipeline.hpp"
#include "herbert/rng.hpp"
#include "herbert/synthetic.hpp"
#include "herbert/tensor.hpp"
#include "herbert/tokenizer.hpp"
#include "herbert/training.hpp"
#include "herbert/transfer.hpp"
#include "herbert/utf8.hpp"
