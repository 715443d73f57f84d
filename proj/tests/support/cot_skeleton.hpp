#pragma once

// Skeleton of a two-criticism long-CoT transcript about listing the planets:
// answer, criticism, improvement, closing criticism, done. Prose is filler.

#include <string>

namespace refinery::testing {

inline const std::string planets_prompt = "Please give me a list of planets in our solar system.";

inline const std::string planets_cot =
    "<|Start of recursive criticism and improvement|>\n"
    "## Let's answer the question first:\n"
    "\n"
    "Planets in our solar system:\n"
    "1. Mercury\n"
    "2. Venus\n"
    "3. Earth\n"
    "4. Mars\n"
    "5. Jupiter\n"
    "6. Saturn\n"
    "7. Uranus\n"
    "8. Neptune\n"
    "\n"
    "Which one would you like to know more about?\n"
    "\n"
    "## Now, let's try to criticize this answer:\n"
    "\n"
    "**Rating: [[8]]**\n"
    "Accurate and short. [filler: the list gives no context about each planet.]\n"
    "\n"
    "**Rating: [[8]]**\n"
    "\n"
    "## Okey, let's improve the above answer based on the criticism:\n"
    "\n"
    "Planets in our solar system, with a note on each:\n"
    "**1.** **Mercury**: [filler]\n"
    "**2.** **Venus**: [filler]\n"
    "\n"
    "...\n"
    "\n"
    "Which planet would you like to explore further?\n"
    "\n"
    "## Now, let's try to criticize this answer:\n"
    "\n"
    "**Rating: [[8]]**\n"
    "Well organized. [filler]\n"
    "\n"
    "...\n"
    "\n"
    "## Okay, now it’s almost done.\n"
    "<|End of recursive criticism and improvement|>\n"
    "\n"
    "Final answer:\n"
    "Planets in our solar system, with a note on each:\n"
    "**1.** **Mercury**: [filler]\n"
    "**2.** **Venus**: [filler]\n"
    "\n"
    "...\n"
    "\n"
    "Which planet would you like to explore further?";

}  // namespace refinery::testing
