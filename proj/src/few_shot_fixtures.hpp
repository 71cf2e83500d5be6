#pragma once

#include <array>
#include <string_view>

namespace latentprobe::detail {

struct FewShotDemo {
    std::array<std::string_view, 5> examples;
    std::string_view answer;
};

inline constexpr std::string_view kSystemPrompt =
    "You are evaluating how coherent a group of text examples is. You will see five short text excerpts. "
    "In each excerpt some tokens are highlighted between << and >>. Four of the excerpts were chosen because "
    "the same hidden feature is active on their highlighted tokens; the fifth excerpt, the intruder, was not, "
    "and its highlights were placed at random. Find the intruder. Consider what the highlighted tokens and "
    "their contexts have in common. Reply with a short justification and end your reply with the number of "
    "the intruder (1-5).";

// Hand-written synthetic demonstrations. Changing them changes every score,
// so edit deliberately.
inline constexpr std::array<FewShotDemo, 2> kFewShotDemos{{
    {{
         "we stayed inside all afternoon because the <<rain>> would not stop",
         "the forecast promised <<snow>> by the weekend, so we bought new boots",
         "she parked the car next to the <<old>> bakery on the corner",
         "a light <<drizzle>> had settled over the harbour by dawn",
         "after the <<hail>> storm every car on the street had dents",
     },
     "Examples 1, 2, 4 and 5 highlight a kind of precipitation. Example 3 highlights an ordinary adjective "
     "with nothing to do with weather. The intruder is 3"},
    {{
         "the meeting was moved to <<Tuesday>> afternoon at the last minute",
         "he counted the coins twice and put them back in the <<jar>>",
         "we will ship the order on <<Friday>> if the parts arrive",
         "the museum is closed every <<Monday>> during the winter",
         "her flight lands late on <<Sunday>> night",
     },
     "Examples 1, 3, 4 and 5 highlight days of the week. Example 2 highlights a household object. "
     "The intruder is 2"},
}};

}  // namespace latentprobe::detail
